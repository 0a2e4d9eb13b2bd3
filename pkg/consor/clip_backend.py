"""Offline feature filler backed by a pretrained open_clip model.

Only ``consor build-fixtures --provider clip`` imports this module. It needs the ``clip`` extra
(``pip install consor-relations[clip]``) and pretrained weights; nothing else in the package does.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch

from .encoders import EncoderConfig, EncoderProvider, TextFeatures, VisualFeatures
from .errors import ConfigError, MissingFixtureError, ShapeMismatchError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".webp", ".bmp")


class OpenClipFeatureExtractor(EncoderProvider):
    """Reads every residual-block output of both towers through forward hooks.

    Visual layer 0 is the ``ln_pre`` output and text layer 0 the token plus position embedding;
    the CLS token is dropped from the per-layer patch features and replaced by the image embedding.
    """

    def __init__(
        self,
        config: EncoderConfig,
        image_dir: Union[str, Path],
        model_name: str = "ViT-B-16",
        pretrained: Optional[str] = "openai",
        device: str = "cpu",
    ) -> None:
        try:
            import open_clip
        except ImportError as exc:  # pragma: no cover - depends on the optional extra
            raise ConfigError("the clip provider needs the optional extra: pip install consor-relations[clip]") from exc

        self.config = config
        self.image_dir = Path(image_dir)
        self.device = torch.device(device)
        model, _, preprocess = open_clip.create_model_and_transforms(model_name, pretrained=pretrained)
        self.model = model.to(self.device).eval()
        self.preprocess = preprocess
        self.tokenizer = open_clip.get_tokenizer(model_name)
        self._visual: Dict[str, VisualFeatures] = {}
        self._text: Dict[str, TextFeatures] = {}
        self._check_geometry()

    def _check_geometry(self) -> None:
        visual = self.model.visual
        blocks = len(visual.transformer.resblocks)
        width = visual.transformer.width
        text_blocks = len(self.model.transformer.resblocks)
        grid = tuple(visual.grid_size)
        expected = (self.config.n_layers, self.config.vis_hidden, self.config.txt_hidden, self.config.patch_grid)
        found = (blocks, width, self.model.transformer.width, grid)
        if blocks != text_blocks or expected != found:
            raise ShapeMismatchError(
                f"encoder config (layers, r_v, r_t, grid) = {expected} does not match the model {found}"
            )

    def _image_path(self, image_id: str) -> Optional[Path]:
        for suffix in IMAGE_SUFFIXES:
            path = self.image_dir / f"{image_id}{suffix}"
            if path.is_file():
                return path
        return None

    def missing_images(self, image_ids) -> List[str]:
        return [image_id for image_id in image_ids if self._image_path(image_id) is None]

    def missing_texts(self, texts) -> List[str]:
        return []

    @staticmethod
    def _record(store: List[torch.Tensor], batch_first: bool):
        def hook(_module: torch.nn.Module, _inputs: Any, output: torch.Tensor) -> None:
            tokens = output if batch_first else output.permute(1, 0, 2)
            store.append(tokens[0].detach().float().cpu())

        return hook

    def _run_hooked(self, modules, call) -> tuple[List[torch.Tensor], torch.Tensor]:
        """``modules`` is a list of (module, batch_first) pairs, hooked in call order."""

        captured: List[torch.Tensor] = []
        handles = [module.register_forward_hook(self._record(captured, first)) for module, first in modules]
        try:
            with torch.no_grad():
                output = call()
        finally:
            for handle in handles:
                handle.remove()
        return captured, output

    def visual_features(self, image_id: str) -> VisualFeatures:
        cached = self._visual.get(image_id)
        if cached is not None:
            return cached
        path = self._image_path(image_id)
        if path is None:
            raise MissingFixtureError([image_id], kind="image file")
        from PIL import Image

        with Image.open(path) as image:
            pixels = self.preprocess(image.convert("RGB")).unsqueeze(0).to(self.device)
        visual = self.model.visual
        batch_first = getattr(visual.transformer, "batch_first", True)
        # ln_pre runs before any sequence-first permute
        modules = [(visual.ln_pre, True)] + [(block, batch_first) for block in visual.transformer.resblocks]
        captured, embedding = self._run_hooked(modules, lambda: self.model.encode_image(pixels))
        layers = np.stack([layer[1:].numpy() for layer in captured]).astype(np.float32)
        features = VisualFeatures(layers, embedding[0].float().cpu().numpy().astype(np.float32))
        self._visual[image_id] = features
        return features

    def text_features(self, text: str) -> TextFeatures:
        cached = self._text.get(text)
        if cached is not None:
            return cached
        tokens = self.tokenizer([text]).to(self.device)
        eot_position = int(tokens.argmax(dim=-1)[0])
        raw_length = len(self.tokenizer.encode(text)) + 2 if hasattr(self.tokenizer, "encode") else eot_position + 1
        truncated = raw_length > tokens.shape[-1]
        if truncated:
            logger.warning("text truncated to %d tokens: %.60s...", tokens.shape[-1], text)
        transformer = self.model.transformer
        batch_first = getattr(transformer, "batch_first", True)
        with torch.no_grad():
            layer0 = self.model.token_embedding(tokens) + self.model.positional_embedding
        modules = [(block, batch_first) for block in transformer.resblocks]
        captured, embedding = self._run_hooked(modules, lambda: self.model.encode_text(tokens))
        layers = [layer0[0].float().cpu()] + captured
        features = TextFeatures(
            np.stack([layer.numpy() for layer in layers]).astype(np.float32),
            embedding[0].float().cpu().numpy().astype(np.float32),
            eot_position + 1,
            truncated,
        )
        self._text[text] = features
        return features
