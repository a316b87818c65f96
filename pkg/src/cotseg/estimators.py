"""scikit-learn style wrappers.

``ChainPromptEncoder`` is a transformer from ``(image, query)`` pairs to raw
prompt embeddings; ``ReasoningSegmenter`` is an estimator from
``(image, prompt embedding)`` pairs to binary masks. Chained in a
``sklearn.pipeline.Pipeline`` they form the whole query-to-mask path.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigurationError, InvalidInputError
from .metrics import giou
from .orchestrator import DEFAULT_TEMPLATES, ChainConfig, ChainMode, run_chain
from .segcore.checkpoint import load_checkpoint, save_checkpoint
from .segcore.model import PromptableSegmenter
from .training import InMemoryData, TrainConfig, fit, freeze_policy, predict_logits
from .validation import check_embedding, check_image, check_mask


def check_pairs(X, width: int | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Split ``X`` (a sequence of ``(image, prompt rows)``) into validated lists."""
    if len(X) == 0:
        raise InvalidInputError("empty input")
    images, prompts = [], []
    for i, item in enumerate(X):
        try:
            image, rows = item
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"item {i} is not an (image, prompt) pair") from exc
        images.append(check_image(image))
        prompts.append(check_embedding(rows, width, allow_empty=False))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise InvalidInputError(f"images must share one resolution, got {sorted(shapes)}")
    return images, prompts


class ChainPromptEncoder(TransformerMixin, BaseEstimator):
    """Map ``(image, query)`` pairs to raw prompt embeddings via the
    prompting chain. Stateless: ``fit`` only checks the backend."""

    def __init__(self, backend=None, mode: str = "merged", arm: str = "full", templates=None, max_tokens: int = 512, retries: int = 1):
        self.backend = backend
        self.mode = mode
        self.arm = arm
        self.templates = templates
        self.max_tokens = max_tokens
        self.retries = retries

    def fit(self, X=None, y=None):
        if self.backend is None:
            raise ConfigurationError("no backend configured")
        ChainMode(self.mode)
        if self.arm not in ("reason", "name", "full"):
            raise ConfigurationError(f"unknown arm {self.arm!r}")
        self.embedding_width_ = int(self.backend.embedding_width)
        return self

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "embedding_width_")
        cfg = ChainConfig(max_tokens=self.max_tokens, retries=self.retries)
        self.traces_ = []
        out = []
        for image, query in X:
            trace = run_chain(image, query, self.backend, self.mode, templates=self.templates or DEFAULT_TEMPLATES, config=cfg)
            self.traces_.append(trace)
            out.append(trace.prompt_embeddings(self.arm))
        return out


class ReasoningSegmenter(BaseEstimator):
    """Language-prompted segmenter trained with the frozen-encoder policy.

    ``X`` is a sequence of ``(image, prompt_rows)`` pairs with images of one
    common resolution (``H x W x 3``) and prompt rows of width ``d_llm``;
    ``y`` holds the matching binary masks.
    """

    def __init__(
        self,
        d_llm: int = 64,
        d_vis: int = 128,
        d_hidden: int = 256,
        num_heads: int = 4,
        scales: str = "all",
        learning_rate: float = 1e-4,
        weight_decay: float = 1e-4,
        lambda_bce: float = 1.0,
        lambda_dice: float = 0.5,
        dice_smooth: float = 1.0,
        batch_size: int = 8,
        max_iter: int = 1000,
        train_projection: bool = True,
        threshold: float = 0.5,
        random_state: int = 0,
    ):
        self.d_llm = d_llm
        self.d_vis = d_vis
        self.d_hidden = d_hidden
        self.num_heads = num_heads
        self.scales = scales
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lambda_bce = lambda_bce
        self.lambda_dice = lambda_dice
        self.dice_smooth = dice_smooth
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.train_projection = train_projection
        self.threshold = threshold
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            lambda_bce=self.lambda_bce,
            lambda_dice=self.lambda_dice,
            batch_size=self.batch_size,
            total_iterations=self.max_iter,
            seed=self.random_state,
            dice_smooth=self.dice_smooth,
            train_projection=self.train_projection,
        )

    def _build(self) -> PromptableSegmenter:
        return PromptableSegmenter(
            d_llm=self.d_llm, d_vis=self.d_vis, d_hidden=self.d_hidden, num_heads=self.num_heads,
            scales=self.scales, seed=self.random_state,
        )

    def fit(self, X, y):
        images, prompts = check_pairs(X, self.d_llm)
        h, w = images[0].shape[:2]
        masks = [check_mask(m, (h, w)) for m in y]
        if len(masks) != len(images):
            raise InvalidInputError(f"{len(images)} samples but {len(masks)} masks")
        model = self._build()
        if h % model.image_multiple or w % model.image_multiple:
            raise InvalidInputError(f"image size {(h, w)} must be a multiple of {model.image_multiple}")
        result = fit(self._train_config(), InMemoryData(images, prompts, masks), model)
        self.model_ = model
        self.trainable_ = freeze_policy(model, self.train_projection)
        self.loss_curve_ = [row["total"] for row in result.losses]
        self.n_iter_ = result.iteration
        self.image_shape_ = (h, w)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images, prompts = check_pairs(X, self.d_llm)
        data = InMemoryData(images, prompts, [np.zeros(im.shape[:2], np.uint8) for im in images])
        return predict_logits(self.model_, data).numpy()

    def predict_proba(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean IoU (gIoU) of the predicted masks."""
        return giou(list(zip(self.predict(X), [check_mask(m) for m in y])))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.trainable_, iteration=self.n_iter_, extra={"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> "ReasoningSegmenter":
        from .segcore.checkpoint import read_checkpoint

        manifest, _, _ = read_checkpoint(path)
        est = cls(**manifest["extra"].get("estimator_params", {}))
        model, manifest, _ = load_checkpoint(path)
        est.model_ = model
        est.trainable_ = [n for n, meta in manifest["params"].items() if meta["trainable"]]
        est.n_iter_ = manifest["iteration"]
        return est
