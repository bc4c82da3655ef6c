"""scikit-learn style wrapper around training, prediction and scoring."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .data import Tokenizer
from .metrics import accuracy
from .reasoning import run_reasoning
from .tensor import no_grad
from .training import build_batch, encode_samples, predict, run_training
from .validation import check_samples


class MCOUTEstimator(BaseEstimator):
    """Train a toy vision-language model with continuous thoughts.

    ``X`` is a sequence of :class:`~mcout.data.SyntheticSample` (or their
    JSON records); ``y`` optionally overrides the stored answers.

    Parameters mirror the most used :class:`~mcout.config.RunConfig` fields;
    ``config`` supplies everything else.
    """

    def __init__(self, variant="base", n_thoughts=5, mu=0.3, steps=0, epochs=1, batch_size=4,
                 init_lr=3e-4, min_lr=3e-5, warmup_steps=100, seed=0, eval_mode="open", config=None):
        self.variant = variant
        self.n_thoughts = n_thoughts
        self.mu = mu
        self.steps = steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.init_lr = init_lr
        self.min_lr = min_lr
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.eval_mode = eval_mode
        self.config = config

    def _run_config(self):
        base = self.config if self.config is not None else RunConfig()
        return base.replace(
            variant=self.variant, n_thoughts=self.n_thoughts, mu=self.mu, steps=self.steps,
            epochs=self.epochs, batch_size=self.batch_size, init_lr=self.init_lr, min_lr=self.min_lr,
            warmup_steps=self.warmup_steps, seed=self.seed, eval_mode=self.eval_mode,
        )

    def fit(self, X, y=None, out_dir=None):
        samples = check_samples(X, y)
        self.run_config_ = self._run_config()
        result = run_training(self.run_config_, out_dir, train_samples=samples)
        self.model_ = result.model
        self.loss_log_ = result.log
        self.n_steps_ = result.total_steps
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.asarray(predict(self.model_, check_samples(X), self.run_config_), dtype=object)

    def transform(self, X):
        """Last hidden state after the final thought, one float64 row per sample."""
        check_is_fitted(self, "model_")
        samples = check_samples(X)
        tok = Tokenizer()
        encoded = encode_samples(samples, tok)
        rcfg = self.run_config_.reasoning_config()
        bs = self.run_config_.eval_batch_size
        out = []
        with no_grad():
            for lo in range(0, len(encoded), bs):
                batch = build_batch(self.model_, encoded[lo:lo + bs], tok)
                state, _ = run_reasoning(self.model_, batch, rcfg)
                out.append(state.h_last.data.reshape(len(encoded[lo:lo + bs]), -1).astype(np.float64))
        return np.concatenate(out, axis=0)

    def score(self, X, y=None):
        samples = check_samples(X, y)
        return accuracy(list(self.predict(samples)), [s.answer for s in samples], self.eval_mode)
