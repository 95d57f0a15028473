"""Shared test utilities: flattened-parameter closures for gradient
checking, planted-signal synthetic datasets, and a quickly trained tiny
model for attribution tests."""

from __future__ import annotations

import numpy as np

from polyfuse import embed_store as es
from polyfuse import model as M
from polyfuse import trainer
from polyfuse.ndmath import Mode
from polyfuse.pipeline import PolymerRecord
from polyfuse.rng import Stream, derive_key

from corpus import generate


def flatten(tensors: dict[str, np.ndarray], names: list[str]) -> np.ndarray:
    return np.concatenate([np.asarray(tensors[n], dtype=np.float64).ravel() for n in names])


def model_loss_fn(params: M.ModelParams, llm, uni, targets, loss_kind="mse"):
    """Closure mapping a flat trainable-parameter vector to (loss, grad),
    for use with grad_check.  Eval-mode batch norm keeps f deterministic."""
    names = sorted(params.trainable())
    shapes = {n: params.trainable()[n].shape for n in names}

    def f(theta: np.ndarray):
        tensors = params.trainable()
        off = 0
        for n in names:
            size = int(np.prod(shapes[n]))
            tensors[n][...] = theta[off : off + size].reshape(shapes[n])
            off += size
        loss, grads = M.loss_and_grads(
            params, llm, uni, targets, loss_kind, mode=Mode.EVAL
        )
        return loss, flatten(grads, names)

    return f, flatten(params.trainable(), names)


def random_inputs(config: M.ModelConfig, n: int, seed: int):
    llm = Stream(derive_key("inputs-llm", seed)).normal(n * config.llm_dim)
    uni = Stream(derive_key("inputs-uni", seed)).normal(n * config.uni_dim)
    return llm.reshape(n, config.llm_dim), uni.reshape(n, config.uni_dim)


def planted_dataset(
    n: int = 500,
    seed: int = 0,
    llm_dim: int = 16,
    uni_dim: int = 12,
    snr: float = 10.0,
    prop: str = "Tg",
    pure_noise: bool = False,
):
    """Synthetic task with a known linear signal.

    Embeddings carry unit-variance polymer features in their leading
    dims; the target is w . phi plus Gaussian noise whose amplitude is
    signal_std / snr.  With pure_noise=True the target is noise only.
    """
    strings = generate(n, seed=derive_key("planted-strings", seed) % (2**31))
    ids = [f"poly{i}" for i in range(n)]
    spec = es.PlantSpec(dict(zip(ids, strings)))
    llm = es.synth_embeddings(ids, es.EmbeddingMeta(es.Modality.TEXT_LLM, llm_dim), seed, spec)
    uni = es.synth_embeddings(
        ids, es.EmbeddingMeta(es.Modality.STRUCTURE_3D, uni_dim), seed + 1, spec
    )

    k = len(es.PHI_FEATURES)
    planted = llm.vectors[:, :k].astype(np.float64)
    w = Stream(derive_key("planted-w", seed)).normal(k)
    signal = planted @ w
    noise = Stream(derive_key("planted-noise", seed)).normal(n)
    if pure_noise:
        y = noise
    else:
        y = signal + (signal.std() / snr) * noise
    records = [
        PolymerRecord(pid, s, {prop: float(v)}) for pid, s, v in zip(ids, strings, y)
    ]
    return records, llm, uni


def fast_config(**overrides) -> trainer.TrainConfig:
    """Desk-scale recipe that recovers the planted linear signal."""
    base = dict(
        batch_size=64,
        hidden=16,
        rank=4,
        alpha=8.0,
        lr=1e-2,
        weight_decay=1e-5,
        dropout=0.5,
        loss_kind="mse",
        max_epochs=500,
        patience_early=60,
        patience_lr=15,
        lr_factor=0.5,
        min_lr=1e-6,
        min_delta=1e-6,
        seed=42,
    )
    base.update(overrides)
    return trainer.TrainConfig(**base)


def train_tiny_model(n=80, seed=3, llm_dim=12, uni_dim=10, epochs=40):
    """A small trained network plus matching embeddings, for attribution."""
    import tempfile

    records, llm, uni = planted_dataset(n=n, seed=seed, llm_dim=llm_dim, uni_dim=uni_dim)
    config = fast_config(hidden=16, max_epochs=epochs, batch_size=16, dropout=0.1)
    with tempfile.TemporaryDirectory() as td:
        report = trainer.train_cv(records, llm, uni, "Tg", config, checkpoint_dir=td)
        params, meta = M.load_checkpoint(report.folds[0].checkpoint_path)
    return params, meta, records, llm, uni
