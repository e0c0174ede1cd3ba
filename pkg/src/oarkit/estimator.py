"""scikit-learn style wrapper around the recognizer, its trainer and the online runtime."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, OARModel
from .runtime import CostModel, ExitRecord, run_stream
from .tfem import MODALITIES
from .training import TrainConfig, iterative_train, prepare_clip
from .validation import check_fraction, check_labels, check_positive, check_streams, open_stream


class OnlineActionRecognizer(ClassifierMixin, BaseEstimator):
    """Early-exit action recognizer over compressed-domain streams.

    ``X`` is a sequence of stream files (or their bytes), or a dataset
    directory with a manifest. Labels default to each stream's header class.

    Example::

        clf = OnlineActionRecognizer(random_state=7).fit("data/")
        clf.predict(["data/class_0/clip_0.oar"])
    """

    def __init__(self, modalities=MODALITIES, theta: float = 1e-2, tau: int = 2, learning_rate: float = 0.01,
                 momentum: float = 0.9, epochs_per_test: int = 3, max_iters: int = 8, gate_label_cap: int = 5,
                 samples_per_clip: int = 8, batch_size: int = 32, val_fraction: float = 0.2,
                 tlsm_ratio: float = 1.0 / 16, tlsm_frames: int = 4, gate_threshold: float = 0.5,
                 exit_threshold: float = 0.5, policy: str = "online", cost_model=None, random_state: int = 0):
        self.modalities = modalities
        self.theta = theta
        self.tau = tau
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs_per_test = epochs_per_test
        self.max_iters = max_iters
        self.gate_label_cap = gate_label_cap
        self.samples_per_clip = samples_per_clip
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.tlsm_ratio = tlsm_ratio
        self.tlsm_frames = tlsm_frames
        self.gate_threshold = gate_threshold
        self.exit_threshold = exit_threshold
        self.policy = policy
        self.cost_model = cost_model
        self.random_state = random_state

    def _validate_params(self) -> None:
        check_positive(self.theta, "theta")
        check_positive(self.learning_rate, "learning_rate")
        check_positive(self.batch_size, "batch_size")
        check_positive(self.samples_per_clip, "samples_per_clip")
        check_fraction(self.val_fraction, "val_fraction", closed=False)
        check_fraction(self.gate_threshold, "gate_threshold")
        check_fraction(self.exit_threshold, "exit_threshold")
        if self.policy not in ("online", "offline"):
            raise ValueError(f"policy must be 'online' or 'offline', got {self.policy!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            theta=self.theta, tau=self.tau, learning_rate=self.learning_rate, momentum=self.momentum,
            epochs_per_test=self.epochs_per_test, max_iters=self.max_iters, gate_label_cap=self.gate_label_cap,
            seed=int(self.random_state), samples_per_clip=self.samples_per_clip, batch_size=self.batch_size,
            val_fraction=self.val_fraction,
        )

    def fit(self, X, y=None, checkpoint_dir=None):
        self._validate_params()
        streams = check_streams(X)
        readers = [open_stream(s) for s in streams]
        header = readers[0].header
        for i, r in enumerate(readers[1:], 1):
            if (r.header["height"], r.header["width"], r.header["channels"]) != \
                    (header["height"], header["width"], header["channels"]):
                raise ValueError(f"stream {i} differs in frame geometry from stream 0")
        y = np.array([r.class_id for r in readers]) if y is None else check_labels(y, len(readers))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need streams from at least two classes")

        config = ModelConfig(
            num_classes=int(self.classes_.size), image_channels=int(header["channels"]),
            height=int(header["height"]), width=int(header["width"]), modalities=tuple(self.modalities),
            tlsm_ratio=self.tlsm_ratio, tlsm_frames=self.tlsm_frames,
            gate_threshold=self.gate_threshold, exit_threshold=self.exit_threshold,
        )
        model = OARModel(config, seed=int(self.random_state))
        clips = [prepare_clip(list(r), int(k), model, r.gop, str(s)) for r, k, s in zip(readers, encoded, streams)]
        self.report_ = iterative_train(model, clips, self.train_config(), checkpoint_dir)
        self.model_ = model
        self.n_streams_seen_ = len(clips)
        return self

    def _cost(self) -> CostModel:
        if self.cost_model is None:
            return CostModel.default(self.model_.config.modalities)
        if isinstance(self.cost_model, CostModel):
            return self.cost_model
        return CostModel.from_file(self.cost_model)

    def predict_exit(self, X) -> list[ExitRecord]:
        """Run every stream through the frame loop and return its exit record.

        Header class ids are not checked against the model here, since ``fit``
        may have been given labels of its own.
        """
        check_is_fitted(self, "model_")
        cost = self._cost()
        return [run_stream(self.model_, open_stream(s), cost, self.policy, check_label=False) for s in check_streams(X)]

    def predict(self, X) -> np.ndarray:
        records = self.predict_exit(X)
        return self.classes_[[r.prediction for r in records]]

    def transform(self, X) -> np.ndarray:
        """Per stream: exit frame followed by the main-network activation count of each modality."""
        records = self.predict_exit(X)
        mods = self.model_.config.modalities
        return np.array([[r.exit_frame] + [r.activations[m] for m in mods] for r in records], dtype=np.float64)
