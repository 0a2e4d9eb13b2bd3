import numpy as np
import pytest

from consor import prompts
from consor.encoders import EncoderProvider, SyntheticProvider
from consor.errors import PromptError
from consor.model import RelationTaxonomy


class TableProvider(EncoderProvider):
    """Joint embeddings looked up from plain dictionaries."""

    def __init__(self, images, texts):
        self.images = images
        self.texts = texts

    def visual_features(self, image_id):
        raise NotImplementedError

    def text_features(self, text):
        raise NotImplementedError

    def joint_embed_image(self, image_id):
        return self.images[image_id]

    def joint_embed_text(self, text):
        return self.texts[text]


def _selection(image_id="img"):
    ranked = {
        "scene_category": tuple((v, 0.0) for v in "abcde"),
        "scene_attribute": tuple((v, 0.0) for v in "fghij"),
        "object_category": tuple((v, 0.0) for v in "klmno"),
        "emotion": (("p", 0.0),),
    }
    return prompts.VisualVocabSelection(image_id, ranked, dict(prompts.DEFAULT_TOP_K))


def test_vocab_templates_render_exactly():
    assert prompts.render_vocab_prompt("scene_category", "office") == "The photo is taken in office."
    assert prompts.render_vocab_prompt("emotion", "joy") == "The emotion in this photo is joy."
    assert prompts.render_vocab_prompt("object_category", "bow-tie") == "There are bow-tie in the photo."
    with pytest.raises(PromptError):
        prompts.render_vocab_prompt("weather", "rain")


def test_suffix_follows_corpus_order_and_wording():
    assert prompts.format_vocab_sentences(_selection()) == (
        "The photo is taken in a, b, c, d, e. "
        "This scene attribute of the image are f, g, h, i, j. "
        "There are k, l, m, n, o in the photo. "
        "This emotion in this photo is p."
    )


def test_assembled_prompts_differ_only_in_class_sentence():
    taxonomy = RelationTaxonomy("t", ("friend", "family", "couple"))
    built = prompts.assemble_social_prompts(_selection(), taxonomy)
    assert [p.relation for p in built] == ["friend", "family", "couple"]
    assert built[0].text.startswith("In this photo, the social relation of this person pair is friend. ")
    suffixes = {p.text.split(". ", 1)[1] for p in built}
    assert len(suffixes) == 1


def test_short_selection_is_prompt_error():
    selection = _selection()
    ranked = dict(selection.ranked)
    ranked["scene_category"] = ranked["scene_category"][:4]
    broken = prompts.VisualVocabSelection("img", ranked, dict(prompts.DEFAULT_TOP_K))
    with pytest.raises(PromptError, match="scene_category"):
        prompts.assemble_social_prompts(broken, RelationTaxonomy("t", ("a", "b")))


def test_top_k_matches_exhaustive_sort():
    rng = np.random.default_rng(11)
    for case in range(100):
        n = int(rng.integers(5, 1001))
        k = int(rng.integers(1, 6))
        vocabs = tuple(f"v{case}-{i}" for i in range(n))
        corpus = prompts.Corpus("object_category", vocabs, k)
        # small integer vectors: exact dot products and plenty of ties
        image = rng.integers(-3, 4, size=8).astype(float)
        text_vecs = rng.integers(-3, 4, size=(n, 8)).astype(float)
        provider = TableProvider({"img": image}, dict(zip(corpus.rendered(), text_vecs)))

        selection = prompts.select_visual_vocabs("img", [corpus], provider)

        scores = [float(sum(a * b for a, b in zip(row, image))) for row in text_vecs]
        oracle = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
        assert selection.vocabs("object_category") == tuple(vocabs[i] for i in oracle)
        assert selection.scores("object_category") == tuple(scores[i] for i in oracle)


def test_selector_caches_per_corpus_digest(mini_encoder):
    provider = SyntheticProvider(mini_encoder, seed=4)
    corpus = prompts.Corpus("emotion", ("joy", "trust", "fear"), 1)
    selector = prompts.VocabSelector([corpus], provider)
    first = selector.select("img")
    assert selector.select("img") is first

    other = prompts.VocabSelector([prompts.Corpus("emotion", ("joy", "trust", "fear"), 2)], provider)
    assert other.digest != selector.digest
    assert len(other.select("img").vocabs("emotion")) == 2


def test_corpus_requires_enough_vocabs():
    with pytest.raises(PromptError, match="top_k"):
        prompts.Corpus("scene_category", ("office", "beach"), 5)


def test_corpus_files_and_fallbacks(tmp_path, caplog):
    (tmp_path / "scene_category.txt").write_text("# places\noffice\n\nbeach\nchurch\npark\nzoo\n", encoding="utf-8")
    (tmp_path / "scene_attribute.txt").write_text("indoor\noutdoor\nsunny\nnoisy\nquiet\n", encoding="utf-8")
    with caplog.at_level("WARNING", logger="consor.prompts"):
        corpora = prompts.load_corpora(tmp_path)
    by_kind = {corpus.kind: corpus for corpus in corpora}
    assert [corpus.kind for corpus in corpora] == list(prompts.CORPUS_KINDS)
    assert by_kind["scene_category"].vocabs == ("office", "beach", "church", "park", "zoo")
    assert len(by_kind["emotion"].vocabs) == 24
    assert len(by_kind["object_category"].vocabs) == 1000
    assert "emotion" not in caplog.text


def test_default_corpora_are_bundled(caplog):
    with caplog.at_level("WARNING", logger="consor.prompts"):
        corpora = prompts.load_corpora(None)
    by_kind = {corpus.kind: corpus for corpus in corpora}
    assert {kind: len(corpus.vocabs) for kind, corpus in by_kind.items()} == prompts.DEFAULT_SIZES
    assert not [record for record in caplog.records if record.name == "consor.prompts"]
    for kind in ("scene_category", "scene_attribute", "emotion"):
        assert len(set(by_kind[kind].vocabs)) == len(by_kind[kind].vocabs)
    assert "church outdoor" in by_kind["scene_category"].vocabs
    assert {"sports", "shopping", "playing", "camping"} <= set(by_kind["scene_attribute"].vocabs)
    assert by_kind["scene_attribute"].rendered()[0] == "The scene attribute of the image is sailing/boating."


def test_corpus_kinds_are_checked():
    with pytest.raises(PromptError, match="weather"):
        prompts.load_corpora(None, kinds=("weather",))
    assert [c.kind for c in prompts.load_corpora(None, kinds=("emotion",))] == ["emotion"]


def test_vocab_report_and_prompt_file(tmp_path):
    selection = _selection("img-7")
    prompts.write_vocab_report(selection, tmp_path / "img-7.json")
    assert prompts.read_vocab_report(tmp_path / "img-7.json") == selection

    built = prompts.assemble_social_prompts(selection, RelationTaxonomy("t", ("a", "b")))
    prompts.write_prompt_file(built, tmp_path / "img-7.txt")
    lines = (tmp_path / "img-7.txt").read_text(encoding="utf-8").splitlines()
    assert [line.split("\t")[0] for line in lines] == ["a", "b"]
