"""scikit-learn style wrappers around training and inference.

``X`` is always a list of :class:`renderflow.scene.Sequence`; reference
frames inside the sequences are the supervision, so ``y`` is ignored.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from renderflow.bridge import BridgeConfig
from renderflow.errors import InvalidArgumentError
from renderflow.evaluate import evaluate_model
from renderflow.infer import InferConfig, NetVelocity, render_sequence
from renderflow.inverse import InverseConfig, MODALITIES, inverse_forward, train_inverse, build_inverse
from renderflow.model import NetConfig
from renderflow.scene.sequence import Sequence
from renderflow.train import TrainConfig, train_stage1, train_stage2


def check_sequences(X, min_frames=1) -> list:
    """Validate an estimator input: a non-empty list of Sequence objects."""
    if isinstance(X, Sequence):
        X = [X]
    if not isinstance(X, (list, tuple)) or not X:
        raise InvalidArgumentError("expected a non-empty list of Sequence objects")
    for i, s in enumerate(X):
        if not isinstance(s, Sequence):
            raise InvalidArgumentError(f"item {i} is {type(s).__name__}, not a Sequence")
        if len(s) < min_frames:
            raise InvalidArgumentError(f"sequence {i} has {len(s)} frames, need at least {min_frames}")
    return list(X)


class NeuralRenderer(BaseEstimator):
    """G-buffers + envmap -> image, trained by bridge matching.

    ``fit`` runs stage 1; ``fit_keyframes`` adds the keyframe adapter.
    """

    def __init__(self, dim=64, depth=4, patch=8, heads=4, steps=500, lr=3e-4, batch=4, warmup_steps=100,
                 lambda_pixel=1.0, sigma=0.005, schedule="discrete4", clip_frames=5, seed=0,
                 infer_steps=1, infer_mode="ode", keyframe_gap=16, stage2_steps=200):
        self.dim = dim
        self.depth = depth
        self.patch = patch
        self.heads = heads
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.warmup_steps = warmup_steps
        self.lambda_pixel = lambda_pixel
        self.sigma = sigma
        self.schedule = schedule
        self.clip_frames = clip_frames
        self.seed = seed
        self.infer_steps = infer_steps
        self.infer_mode = infer_mode
        self.keyframe_gap = keyframe_gap
        self.stage2_steps = stage2_steps

    def _train_config(self, stage, steps):
        return TrainConfig(stage=stage, lr=self.lr, steps=steps, batch=self.batch,
                           warmup_steps=self.warmup_steps, lambda_pixel=self.lambda_pixel,
                           bridge=BridgeConfig(sigma=self.sigma, schedule=self.schedule),
                           clip_frames=self.clip_frames, seed=self.seed, keyframe_gap=self.keyframe_gap)

    def _infer_config(self, **over):
        return InferConfig(**{"steps": self.infer_steps, "mode": self.infer_mode,
                              "chunk_frames": self.clip_frames, "rng_seed": self.seed, **over})

    def fit(self, X, y=None):
        X = check_sequences(X, self.clip_frames)
        res = X[0].resolution
        net = NetConfig(dim=self.dim, depth=self.depth, patch=self.patch, heads=self.heads, image_res=res,
                        env_res=X[0].envmap.resolution)
        self.checkpoint_ = train_stage1(X, self._train_config("base", self.steps), net)
        self.model_ = NetVelocity.from_checkpoint(self.checkpoint_)
        self.history_ = self.checkpoint_.history
        return self

    def fit_keyframes(self, X, y=None):
        check_is_fitted(self, "checkpoint_")
        X = check_sequences(X, self.clip_frames)
        self.base_checkpoint_ = self.checkpoint_
        self.checkpoint_ = train_stage2(X, self.checkpoint_, self._train_config("keyframe", self.stage2_steps))
        self.model_ = NetVelocity.from_checkpoint(self.checkpoint_)
        return self

    def predict(self, X, keyframe_gap=None) -> list:
        """Rendered (F, H, W, 3) clips, one per sequence."""
        check_is_fitted(self, "model_")
        X = check_sequences(X)
        return [render_sequence(self.model_, s, self._infer_config(), keyframe_gap=keyframe_gap).images
                for s in X]

    def score(self, X, y=None, keyframe_gap=None) -> float:
        """Mean per-frame PSNR against the reference frames."""
        check_is_fitted(self, "model_")
        report = evaluate_model(self.model_, check_sequences(X), self._infer_config(), keyframe_gap=keyframe_gap)
        return float(report.aggregate["psnr"])


class IntrinsicDecomposer(TransformerMixin, BaseEstimator):
    """Image clip -> intrinsic layer, using a frozen forward checkpoint."""

    def __init__(self, forward_checkpoint=None, modality="albedo", steps=500, lr=3e-4, batch=4, lora_rank=8,
                 modalities=MODALITIES, seed=0, clip_frames=5):
        self.forward_checkpoint = forward_checkpoint
        self.modality = modality
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.lora_rank = lora_rank
        self.modalities = modalities
        self.seed = seed
        self.clip_frames = clip_frames

    def fit(self, X, y=None):
        if self.forward_checkpoint is None:
            raise InvalidArgumentError("IntrinsicDecomposer needs forward_checkpoint")
        X = check_sequences(X, self.clip_frames)
        cfg = InverseConfig(lora_rank=self.lora_rank, lr=self.lr, steps=self.steps, batch=self.batch,
                            seed=self.seed, clip_frames=self.clip_frames,
                            modality_weights={m: 1.0 for m in self.modalities})
        self.checkpoint_ = train_inverse(X, self.forward_checkpoint, cfg)
        self.model_ = build_inverse(self.checkpoint_, self.forward_checkpoint)
        return self

    def transform(self, X) -> list:
        """Predicted ``modality`` layer for each sequence's reference frames."""
        check_is_fitted(self, "model_")
        X = check_sequences(X)
        return [inverse_forward(self.model_, s.stack("reference"), self.modality) for s in X]

    def predict(self, X) -> list:
        return self.transform(X)

    def decompose(self, rgb_clip, modality=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return inverse_forward(self.model_, rgb_clip, modality or self.modality)
