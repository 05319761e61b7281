"""The hierarchical CNN+LSTM traffic classifier.

Per message, a shared CNN reads the raw 47x200 byte matrix and a small dense
encoder compresses the 100-wide packet statistics; their concatenation is the
per-message embedding.  An LSTM walks the flow's embeddings, its final hidden
state is concatenated with the encoded 170-wide flow statistics, and a dense
head produces one malicious-probability score.  A scalar gate multiplies both
statistics paths so their contribution can be weighted or switched off
entirely (the gate at zero skips reading the statistics at all).

Flows shorter than flow_size are zero-padded and the padded steps run through
the network same as real ones: the LSTM always takes exactly flow_size steps.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import nn
from .features import (EncodedFlow, NormalizationStats, FL_SIZE, MATRIX_COLS,
                       MATRIX_ROWS, PL_SIZE, build_fl, build_pl, encode_flow,
                       encode_packet_raw, normalize_features)
from .http_flow import EmptyFlow, Flow, LABEL_BENIGN, LABEL_MALICIOUS

MODEL_MAGIC = b"HSTF"
MODEL_VERSION = 1


class ConfigMismatch(ValueError):
    pass


class SingleClassDataset(ValueError):
    pass


class VersionMismatch(Exception):
    pass


class CorruptFile(Exception):
    pass


@dataclass(frozen=True)
class ConvSpec:
    kernels: int
    kernel: tuple[int, int]
    pool: tuple[int, int]


# Two conv+pool rounds that collapse 47x200 into a dense-friendly size while
# staying fast on a CPU; fully overridable through HstfConfig.
DEFAULT_CONV_SPECS = (ConvSpec(8, (3, 7), (3, 4)), ConvSpec(16, (3, 5), (2, 4)))


@dataclass
class HstfConfig:
    packet_size: int = 400
    flow_size: int = 4
    matrix_rows: int = MATRIX_ROWS
    matrix_cols: int = MATRIX_COLS
    conv_specs: tuple = DEFAULT_CONV_SPECS
    cnn_dense: int = 128
    pl_encoder_out: int = 20
    pl_dense: int = 5
    lstm_hidden: int = 128
    fl_encoder_out: int = 30
    head_layers: tuple = (64,)
    stat_gate: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.packet_size < 1:
            raise ValueError("packet_size must be >= 1")
        if not 1 <= self.flow_size <= 50:
            raise ValueError("flow_size must be in 1..50")
        self.conv_specs = tuple(
            s if isinstance(s, ConvSpec)
            else ConvSpec(s["kernels"], tuple(s["kernel"]), tuple(s["pool"]))
            for s in self.conv_specs)
        self.head_layers = tuple(self.head_layers)

    @property
    def embedding_size(self) -> int:
        return self.cnn_dense + self.pl_dense

    @property
    def head_input(self) -> int:
        return self.lstm_hidden + self.fl_encoder_out

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_specs"] = [{"kernels": s.kernels, "kernel": list(s.kernel),
                            "pool": list(s.pool)} for s in self.conv_specs]
        d["head_layers"] = list(self.head_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HstfConfig":
        return cls(**d)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    precisions: list = field(default_factory=list)
    recalls: list = field(default_factory=list)
    f1s: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)


# CNN-branch packets processed per im2col chunk; bounds the patch-matrix
# working set (~25 MB at the default geometry) independent of batch size.
_CNN_CHUNK = 64


class HstfModel:
    """Holds all parameters plus the normalization stats used at inference."""

    def __init__(self, config: HstfConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.stats: NormalizationStats | None = None
        self.stat_path_evals = 0  # bumped whenever the PL/FL encoders run
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        dt = config.np_dtype

        self.conv_layers = []
        rows, cols, channels = config.matrix_rows, config.matrix_cols, 1
        for spec in config.conv_specs:
            self.conv_layers.append(nn.init_conv(
                rng, spec.kernels, channels, *spec.kernel, dtype=dt))
            rows, cols = nn.conv_output_shape(rows, cols, *spec.kernel, 1, 1)
            ph, pw = spec.pool
            if ph > rows or pw > cols:
                raise nn.ShapeMismatch(f"pool {spec.pool} does not fit {rows}x{cols}")
            rows, cols = rows // ph, cols // pw
            channels = spec.kernels
        self.flatten_size = channels * rows * cols
        if self.flatten_size < 1:
            raise nn.ShapeMismatch("conv stack collapsed the input to nothing")

        self.cnn_dense = nn.init_dense(rng, self.flatten_size, config.cnn_dense, "relu", dt)
        self.pl_encoder = nn.init_dense(rng, PL_SIZE, config.pl_encoder_out, "relu", dt)
        self.pl_dense = nn.init_dense(rng, config.pl_encoder_out, config.pl_dense,
                                      "identity", dt)
        self.lstm = nn.init_lstm(rng, config.embedding_size, config.lstm_hidden, dt)
        self.fl_encoder = nn.init_dense(rng, FL_SIZE, config.fl_encoder_out, "relu", dt)
        self.head = []
        width = config.head_input
        for out in config.head_layers:
            self.head.append(nn.init_dense(rng, width, out, "relu", dt))
            width = out
        self.head_out = nn.init_dense(rng, width, 1, "identity", dt)

        # shape chain sanity: raw matrix -> cnn_dense; +pl_dense -> lstm input;
        # lstm hidden + fl encoder -> head -> 1
        assert self.lstm.input_size == config.embedding_size
        first_head = self.head[0] if self.head else self.head_out
        assert first_head.w.shape[1] == config.head_input
        assert self.head_out.w.shape[0] == 1

    # -- parameter access ------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.conv_layers):
            out[f"conv{i}_w"] = layer.w
            out[f"conv{i}_b"] = layer.b
        for name, layer in self._dense_layers():
            out[f"{name}_w"] = layer.w
            out[f"{name}_b"] = layer.b
        for gate in ("i", "f", "c", "o"):
            out[f"lstm_w_{gate}"] = getattr(self.lstm, f"w_{gate}")
            out[f"lstm_b_{gate}"] = getattr(self.lstm, f"b_{gate}")
        return out

    def _dense_layers(self):
        yield "cnn_dense", self.cnn_dense
        yield "pl_encoder", self.pl_encoder
        yield "pl_dense", self.pl_dense
        yield "fl_encoder", self.fl_encoder
        for i, layer in enumerate(self.head):
            yield f"head{i}", self.head[i]
        yield "head_out", self.head_out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(p) for name, p in self.params().items()}

    # -- forward pieces ---------------------------------------------------------

    def _cnn_branch(self, packets: np.ndarray, want_caches: bool):
        """packets (M,rows,cols) -> (M,cnn_dense), caches for the chunk."""
        x = packets[:, None, :, :]
        caches = []
        out = x
        for layer, spec in zip(self.conv_layers, self.config.conv_specs):
            out, ccache = nn.conv_forward_batch(out, layer)
            out, pcache = nn.max_pool_forward_batch(out, spec.pool)
            caches.append((ccache, pcache))
        flat = out.reshape(out.shape[0], -1)
        emb, dcache = nn.dense_forward_batch(flat, self.cnn_dense)
        return emb, (caches, dcache) if want_caches else None

    def _cnn_branch_backward(self, demb: np.ndarray, caches, grads: dict):
        conv_caches, dcache = caches
        dflat, dw, db = nn.dense_backward_batch(demb, dcache)
        grads["cnn_dense_w"] += dw
        grads["cnn_dense_b"] += db
        last_pool_idx = conv_caches[-1][1][0]  # pooled output shape
        dout = dflat.reshape(last_pool_idx.shape)
        for i in reversed(range(len(self.conv_layers))):
            ccache, pcache = conv_caches[i]
            dout = nn.max_pool_backward_batch(dout, pcache)
            need_dx = i > 0
            if need_dx:
                dout, dw, db = nn.conv_backward_batch(dout, ccache)
            else:
                _, dw, db = nn.conv_backward_batch(dout, ccache)
                dout = None
            grads[f"conv{i}_w"] += dw
            grads[f"conv{i}_b"] += db

    def _stat_pl(self, pls: np.ndarray, want_caches: bool):
        """PL statistics path (M,100) -> (M,pl_dense), gated."""
        self.stat_path_evals += 1
        enc, c1 = nn.dense_forward_batch(pls, self.pl_encoder)
        out, c2 = nn.dense_forward_batch(enc, self.pl_dense)
        return out * self.config.stat_gate, (c1, c2) if want_caches else None

    def forward_batch(self, mats: np.ndarray, pls: np.ndarray, fls: np.ndarray,
                      want_caches: bool = False):
        """Score a batch; returns (scores, logits, caches)."""
        cfg = self.config
        n = mats.shape[0]
        if mats.shape[1:] != (cfg.flow_size, cfg.matrix_rows, cfg.matrix_cols):
            raise ConfigMismatch(f"matrix batch {mats.shape} does not match config")
        dt = cfg.np_dtype
        packets = mats.reshape(n * cfg.flow_size, cfg.matrix_rows, cfg.matrix_cols)

        # the CNN branch is checkpointed: forward keeps no conv caches, the
        # backward pass recomputes them chunk by chunk from the raw matrices
        embs = np.empty((n * cfg.flow_size, cfg.cnn_dense), dtype=dt)
        for lo in range(0, len(packets), _CNN_CHUNK):
            chunk = packets[lo:lo + _CNN_CHUNK]
            emb, _ = self._cnn_branch(chunk, want_caches=False)
            embs[lo:lo + len(chunk)] = emb

        if cfg.stat_gate != 0.0:
            stat, pl_caches = self._stat_pl(pls.reshape(n * cfg.flow_size, -1).astype(dt),
                                            want_caches)
        else:
            stat, pl_caches = np.zeros((n * cfg.flow_size, cfg.pl_dense), dtype=dt), None
        full = np.concatenate([embs, stat], axis=1).reshape(n, cfg.flow_size, -1)

        c = np.zeros((n, cfg.lstm_hidden), dtype=dt)
        h = np.zeros((n, cfg.lstm_hidden), dtype=dt)
        lstm_caches = []
        for t in range(cfg.flow_size):
            c, h, cache = nn.lstm_step_batch(self.lstm, c, h, full[:, t, :])
            lstm_caches.append(cache if want_caches else None)

        if cfg.stat_gate != 0.0:
            self.stat_path_evals += 1
            flenc, fl_cache = nn.dense_forward_batch(fls.astype(dt), self.fl_encoder)
            flenc = flenc * cfg.stat_gate
        else:
            flenc, fl_cache = np.zeros((n, cfg.fl_encoder_out), dtype=dt), None

        head_in = np.concatenate([h, flenc], axis=1)
        head_caches = []
        out = head_in
        for layer in self.head:
            out, cache = nn.dense_forward_batch(out, layer)
            head_caches.append(cache)
        logits_2d, out_cache = nn.dense_forward_batch(out, self.head_out)
        logits = logits_2d[:, 0]
        scores = nn.sigmoid(logits)
        caches = None
        if want_caches:
            caches = {"packets": packets, "pl_caches": pl_caches,
                      "lstm": lstm_caches, "fl_cache": fl_cache,
                      "head": head_caches, "out": out_cache, "n": n}
        return scores, logits, caches

    def loss_and_grads(self, mats, pls, fls, labels):
        """Mean BCE over the batch plus gradients for every parameter."""
        cfg = self.config
        scores, logits, caches = self.forward_batch(mats, pls, fls, want_caches=True)
        loss, dlogits = nn.bce_with_logits(logits, labels.astype(cfg.np_dtype))
        grads = self.zero_grads()

        dout = dlogits[:, None].astype(cfg.np_dtype)
        dout, dw, db = nn.dense_backward_batch(dout, caches["out"])
        grads["head_out_w"] += dw
        grads["head_out_b"] += db
        for i in reversed(range(len(self.head))):
            dout, dw, db = nn.dense_backward_batch(dout, caches["head"][i])
            grads[f"head{i}_w"] += dw
            grads[f"head{i}_b"] += db

        dh = dout[:, :cfg.lstm_hidden]
        dflenc = dout[:, cfg.lstm_hidden:]
        if cfg.stat_gate != 0.0:
            _, dw, db = nn.dense_backward_batch(dflenc * cfg.stat_gate,
                                                caches["fl_cache"])
            grads["fl_encoder_w"] += dw
            grads["fl_encoder_b"] += db

        n = caches["n"]
        dc = np.zeros_like(dh)
        dfull = np.empty((n, cfg.flow_size, cfg.embedding_size), dtype=cfg.np_dtype)
        for t in reversed(range(cfg.flow_size)):
            dc, dh, dx, g = nn.lstm_step_backward(dh, dc, caches["lstm"][t])
            dfull[:, t, :] = dx
            for gate in ("i", "f", "c", "o"):
                grads[f"lstm_w_{gate}"] += g[f"w_{gate}"]
                grads[f"lstm_b_{gate}"] += g[f"b_{gate}"]

        dflat = dfull.reshape(n * cfg.flow_size, -1)
        demb = dflat[:, :cfg.cnn_dense]
        dstat = dflat[:, cfg.cnn_dense:]
        if cfg.stat_gate != 0.0:
            c1, c2 = caches["pl_caches"]
            dmid, dw, db = nn.dense_backward_batch(dstat * cfg.stat_gate, c2)
            grads["pl_dense_w"] += dw
            grads["pl_dense_b"] += db
            _, dw, db = nn.dense_backward_batch(dmid, c1)
            grads["pl_encoder_w"] += dw
            grads["pl_encoder_b"] += db

        packets = caches["packets"]
        for lo in range(0, len(packets), _CNN_CHUNK):
            chunk = packets[lo:lo + _CNN_CHUNK]
            _, chunk_caches = self._cnn_branch(chunk, want_caches=True)
            self._cnn_branch_backward(demb[lo:lo + len(chunk)], chunk_caches, grads)

        return loss, scores, grads

    # -- public inference -------------------------------------------------------

    def packet_branch(self, matrix: np.ndarray, pl: np.ndarray) -> np.ndarray:
        """Embedding of one message: CNN features next to gated statistics."""
        cfg = self.config
        if matrix.shape != (cfg.matrix_rows, cfg.matrix_cols):
            raise ConfigMismatch(f"matrix {matrix.shape} does not match config")
        if pl.shape != (PL_SIZE,):
            raise ConfigMismatch(f"PL {pl.shape} is not ({PL_SIZE},)")
        dt = cfg.np_dtype
        emb, _ = self._cnn_branch(matrix[None].astype(dt), want_caches=False)
        if cfg.stat_gate != 0.0:
            stat, _ = self._stat_pl(pl[None].astype(dt), want_caches=False)
        else:
            stat = np.zeros((1, cfg.pl_dense), dtype=dt)
        return np.concatenate([emb, stat], axis=1)[0]

    def flow_forward(self, encoded: EncodedFlow) -> float:
        """Malicious-probability score of one already-normalized encoding."""
        cfg = self.config
        expected = (cfg.flow_size, cfg.matrix_rows, cfg.matrix_cols)
        if encoded.matrices.shape != expected:
            raise ConfigMismatch(f"encoded {encoded.matrices.shape} vs {expected}")
        if encoded.pls.shape != (cfg.flow_size, PL_SIZE) or encoded.fl.shape != (FL_SIZE,):
            raise ConfigMismatch("PL/FL shapes do not match config")
        dt = cfg.np_dtype
        scores, _, _ = self.forward_batch(encoded.matrices[None].astype(dt),
                                          encoded.pls[None].astype(dt),
                                          encoded.fl[None].astype(dt))
        return float(scores[0])

    def kink_margin(self, mats, pls, fls) -> float:
        """Smallest |distance| to a ReLU zero or a max-pool tie anywhere in one
        forward pass.  Central finite differences are only trustworthy when
        this margin comfortably exceeds the probe step times the local slope.
        """
        cfg = self.config
        margin = np.inf
        n = mats.shape[0]
        packets = mats.reshape(n * cfg.flow_size, 1, cfg.matrix_rows, cfg.matrix_cols)
        out = packets.astype(cfg.np_dtype)
        for layer, spec in zip(self.conv_layers, self.config.conv_specs):
            out, cache = nn.conv_forward_batch(out, layer)
            margin = min(margin, float(np.min(np.abs(cache[1]))))
            ph, pw = spec.pool
            nn_, cc, hh, ww = out.shape
            ho, wo = hh // ph, ww // pw
            view = out[:, :, :ho * ph, :wo * pw].reshape(nn_, cc, ho, ph, wo, pw)
            patches = view.transpose(0, 1, 2, 4, 3, 5).reshape(nn_, cc, ho, wo, -1)
            if patches.shape[-1] > 1:
                top2 = np.partition(patches, -2, axis=-1)[..., -2:]
                margin = min(margin, float(np.min(top2[..., 1] - top2[..., 0])))
            out, _ = nn.max_pool_forward_batch(out, spec.pool)
        flat = out.reshape(out.shape[0], -1)
        z = flat @ self.cnn_dense.w.T + self.cnn_dense.b
        margin = min(margin, float(np.min(np.abs(z))))
        emb = nn.relu(z)
        if cfg.stat_gate != 0.0:
            zp = pls.reshape(n * cfg.flow_size, -1) @ self.pl_encoder.w.T + self.pl_encoder.b
            margin = min(margin, float(np.min(np.abs(zp))))
            stat = nn.relu(zp) @ self.pl_dense.w.T + self.pl_dense.b
            stat = stat * cfg.stat_gate
        else:
            stat = np.zeros((n * cfg.flow_size, cfg.pl_dense))
        full = np.concatenate([emb, stat], axis=1).reshape(n, cfg.flow_size, -1)
        c = np.zeros((n, cfg.lstm_hidden))
        h = np.zeros((n, cfg.lstm_hidden))
        for t in range(cfg.flow_size):
            c, h, _ = nn.lstm_step_batch(self.lstm, c, h, full[:, t, :])
        if cfg.stat_gate != 0.0:
            zf = fls @ self.fl_encoder.w.T + self.fl_encoder.b
            margin = min(margin, float(np.min(np.abs(zf))))
            flenc = nn.relu(zf) * cfg.stat_gate
        else:
            flenc = np.zeros((n, cfg.fl_encoder_out))
        out = np.concatenate([h, flenc], axis=1)
        for layer in self.head:
            z = out @ layer.w.T + layer.b
            margin = min(margin, float(np.min(np.abs(z))))
            out = nn.relu(z)
        return margin

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        save_model(self, path)


# --- encoding plumbing shared by train/predict -----------------------------------

def _as_encoded(item, cfg: HstfConfig, skip_stats: bool) -> EncodedFlow:
    if isinstance(item, EncodedFlow):
        return item
    if isinstance(item, Flow):
        if skip_stats:
            mats = np.zeros((cfg.flow_size, cfg.matrix_rows, cfg.matrix_cols))
            for i, msg in enumerate(item.messages[:cfg.flow_size]):
                mats[i] = encode_packet_raw(msg, cfg.packet_size,
                                            cfg.matrix_rows, cfg.matrix_cols)
            return EncodedFlow(matrices=mats,
                               pls=np.zeros((cfg.flow_size, PL_SIZE)),
                               fl=np.zeros(FL_SIZE),
                               label=int(item.label == LABEL_MALICIOUS),
                               flow_id=item.flow_id)
        return encode_flow(item, cfg.packet_size, cfg.flow_size,
                           cfg.matrix_rows, cfg.matrix_cols)
    raise TypeError(f"expected Flow or EncodedFlow, got {type(item).__name__}")


def _batch_arrays(items, cfg: HstfConfig, stats: NormalizationStats | None):
    """Stack a list of Flow/EncodedFlow into model-ready arrays.

    With the statistics gate at zero the PL/FL sides are never computed nor
    read; the model sees zeros there.
    """
    skip = cfg.stat_gate == 0.0
    dt = cfg.np_dtype
    n = len(items)
    mats = np.empty((n, cfg.flow_size, cfg.matrix_rows, cfg.matrix_cols), dtype=dt)
    pls = np.zeros((n, cfg.flow_size, PL_SIZE), dtype=dt)
    fls = np.zeros((n, FL_SIZE), dtype=dt)
    labels = np.empty(n, dtype=np.float64)
    for i, item in enumerate(items):
        enc = _as_encoded(item, cfg, skip)
        mats[i] = enc.matrices
        if not skip:
            if stats is not None:
                pls[i] = stats.scale_pl(enc.pls)
                fls[i] = stats.scale_fl(enc.fl)
            else:
                pls[i] = enc.pls
                fls[i] = enc.fl
        labels[i] = enc.label
    return mats, pls, fls, labels


def _dataset_labels(dataset, cfg) -> np.ndarray:
    out = np.empty(len(dataset), dtype=int)
    for i, item in enumerate(dataset):
        if isinstance(item, EncodedFlow):
            out[i] = item.label
        elif isinstance(item, Flow):
            out[i] = int(item.label == LABEL_MALICIOUS)
        else:
            raise TypeError(f"expected Flow or EncodedFlow, got {type(item).__name__}")
    return out


def _fit_stats(dataset, cfg: HstfConfig) -> NormalizationStats:
    stats = NormalizationStats.empty()
    for item in dataset:
        if isinstance(item, EncodedFlow):
            stats.update(item.pls, item.fl)
        else:
            pls = np.zeros((cfg.flow_size, PL_SIZE))
            for i, msg in enumerate(item.messages[:cfg.flow_size]):
                pls[i] = build_pl(msg)
            stats.update(pls, build_fl(item))
    return stats


def predict_scores(model: HstfModel, dataset: Sequence, batch_size: int = 256) -> np.ndarray:
    """Forward-only scores for a sequence of Flow/EncodedFlow."""
    scores = np.empty(len(dataset))
    for lo in range(0, len(dataset), batch_size):
        chunk = dataset[lo:lo + batch_size]
        mats, pls, fls, _ = _batch_arrays(chunk, model.config, model.stats)
        s, _, _ = model.forward_batch(mats, pls, fls)
        scores[lo:lo + len(chunk)] = s
    return scores


def train(dataset: Sequence, cfg: HstfConfig, val_dataset: Sequence | None = None,
          early_stop_f1: float | None = None, verbose: bool = False):
    """Mini-batch training; returns (model, history).

    dataset items may be Flows or EncodedFlows.  Normalization statistics are
    fitted on this dataset only and stored on the model.  History metrics come
    from val_dataset when given, otherwise from the epoch's own running
    training predictions.  early_stop_f1 stops training once the monitored F1
    reaches the threshold.
    """
    labels_all = _dataset_labels(dataset, cfg)
    if len(dataset) == 0 or labels_all.min() == labels_all.max():
        raise SingleClassDataset("training needs both benign and malicious flows")

    rng = np.random.default_rng(cfg.seed)
    model = HstfModel(cfg, rng)
    if cfg.stat_gate != 0.0:
        model.stats = _fit_stats(dataset, cfg)
    else:
        zeros = np.zeros(PL_SIZE)
        model.stats = NormalizationStats(zeros, zeros.copy(),
                                         np.zeros(FL_SIZE), np.zeros(FL_SIZE))
    optimizer = nn.Optimizer(nn.OptimizerConfig(kind="adam",
                                                learning_rate=cfg.learning_rate))
    params = model.params()
    history = TrainHistory()

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        tp = fp = fn = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = [dataset[i] for i in idx]
            mats, pls, fls, y = _batch_arrays(batch, cfg, model.stats)
            loss, scores, grads = model.loss_and_grads(mats, pls, fls, y)
            optimizer.step(params, grads)
            epoch_loss += loss * len(idx)
            pred = scores >= 0.5
            tp += int(np.sum(pred & (y == 1)))
            fp += int(np.sum(pred & (y == 0)))
            fn += int(np.sum(~pred & (y == 1)))

        if val_dataset is not None:
            val_scores = predict_scores(model, val_dataset)
            val_y = _dataset_labels(val_dataset, cfg)
            pred = val_scores >= 0.5
            tp = int(np.sum(pred & (val_y == 1)))
            fp = int(np.sum(pred & (val_y == 0)))
            fn = int(np.sum(~pred & (val_y == 1)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

        history.losses.append(epoch_loss / len(order))
        history.precisions.append(precision)
        history.recalls.append(recall)
        history.f1s.append(f1)
        history.epoch_seconds.append(time.perf_counter() - start)
        if verbose:
            print(f"epoch {epoch + 1}/{cfg.epochs}: loss {history.losses[-1]:.4f} "
                  f"P {precision:.4f} R {recall:.4f} F1 {f1:.4f} "
                  f"({history.epoch_seconds[-1]:.1f}s)")
        if early_stop_f1 is not None and f1 >= early_stop_f1:
            break
    return model, history


def predict(flow: Flow, model: HstfModel, threshold: float = 0.5):
    """Classify one flow; returns (label, score)."""
    if not flow.messages:
        raise EmptyFlow(flow.flow_id)
    cfg = model.config
    enc = _as_encoded(flow, cfg, skip_stats=cfg.stat_gate == 0.0)
    if model.stats is not None and cfg.stat_gate != 0.0:
        enc = normalize_features(enc, model.stats)
    score = model.flow_forward(enc)
    label = LABEL_MALICIOUS if score >= threshold else LABEL_BENIGN
    return label, score


# --- model file -------------------------------------------------------------------
# Layout (little-endian): magic "HSTF", u16 version, u32 header length, JSON
# header {config, stats, tensors:[{name, dtype, shape}]}, tensor bytes in
# header order, sha256 of everything before the digest.

def save_model(model: HstfModel, path) -> None:
    params = model.params()
    tensors = []
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        dt = arr.dtype.newbyteorder("<")
        blobs.append(arr.astype(dt, copy=False).tobytes())
        tensors.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
    header = {"config": model.config.to_dict(),
              "stats": model.stats.to_dict() if model.stats else None,
              "tensors": tensors}
    head_bytes = json.dumps(header, separators=(",", ":")).encode()
    payload = (MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(head_bytes))
               + head_bytes + b"".join(blobs))
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())


def load_model(path) -> HstfModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MODEL_MAGIC) + 6 + 32 or blob[:4] != MODEL_MAGIC:
        raise CorruptFile(f"{path}: not a model file")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    version, head_len = struct.unpack("<HI", payload[4:10])
    if version != MODEL_VERSION:
        raise VersionMismatch(f"{path}: model format {version}, expected {MODEL_VERSION}")
    header = json.loads(payload[10:10 + head_len].decode())
    cfg = HstfConfig.from_dict(header["config"])
    model = HstfModel(cfg)
    if header["stats"] is not None:
        model.stats = NormalizationStats.from_dict(header["stats"])
    params = model.params()
    offset = 10 + head_len
    for spec in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(spec["dtype"]), offset=offset,
                            count=int(np.prod(spec["shape"], dtype=int)))
        arr = arr.reshape(spec["shape"])
        target = params[spec["name"]]
        if target.shape != arr.shape:
            raise CorruptFile(f"{path}: tensor {spec['name']} shape mismatch")
        target[...] = arr
        offset += arr.nbytes
    return model
