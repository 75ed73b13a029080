"""Training loop, optimizers, checkpointing, and grid search.

Training scores unique (anchor, relation) queries against multi-hot answer
vectors over all entities. Each batch re-samples an edge-dropout view of
the augmented train split for message passing; the loss targets always
keep every train answer, including dropped ones.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import Tensor
from .decoder import DecoderConfig, bce_loss, conve_score, init_decoder_params
from .encoder import (EncoderConfig, ProximityAdjacency, RelationalAdjacency,
                      encode, init_encoder_params)
from .kgdata import ContractError, KnowledgeGraph, sample_edge_dropout
from .proximity import (ProximityGraph, accumulate_spm, build_proximity_graph,
                        extract_qa_pairs)

GRID_BATCH_SIZES = (256, 512, 1024)
GRID_LEARNING_RATES = (1e-4, 3e-4, 5e-3)
GRID_DIMS = (500, 1000)
GRID_LAYERS = (1, 2, 3)
GRID_DROP_RATES = (0.1, 0.3, 0.5, 0.7, 1.0)
GRID_M = (25, 50, 100, 500)
GRID_I = (0.5, 1.0, 3.0, 5.0)

_CKPT_MAGIC = b"PKCK"
_CKPT_VERSION = 1


class NumericError(Exception):
    """Training diverged to a non-finite loss."""


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    epochs: int = 10
    edge_drop_rate: float = 0.1
    eval_every: int = 0          # 0 disables periodic validation
    seed: int = 0
    label_smoothing: float = 0.1
    allow_off_grid: bool = False

    def validate(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.edge_drop_rate <= 1.0:
            raise ContractError("edge_drop_rate must be in [0,1]")
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate < 0:
            raise ContractError("epochs, batch_size and learning_rate must be non-negative")
        if not self.allow_off_grid:
            if self.batch_size not in GRID_BATCH_SIZES:
                raise ContractError(
                    f"batch_size {self.batch_size} outside the published grid {GRID_BATCH_SIZES}; "
                    "set allow_off_grid to override")
            if self.edge_drop_rate not in GRID_DROP_RATES:
                raise ContractError(
                    f"edge_drop_rate {self.edge_drop_rate} outside the published grid "
                    f"{GRID_DROP_RATES}; set allow_off_grid to override")


@dataclass
class QueryBatch:
    queries: np.ndarray   # [B, 2] (anchor, relation)
    targets: np.ndarray   # [B, n_e] smoothed multi-hot


def train_query_table(kg: KnowledgeGraph) -> tuple[np.ndarray, list[np.ndarray]]:
    """Unique (anchor, relation) queries of the augmented train split with their answers."""
    if not kg.augmented:
        raise ContractError("training requires an augmented knowledge graph")
    answers: dict[tuple[int, int], set[int]] = {}
    for h, r, t in kg.train:
        answers.setdefault((int(h), int(r)), set()).add(int(t))
    keys = sorted(answers)
    queries = np.asarray(keys, dtype=np.int64).reshape(-1, 2)
    answer_lists = [np.asarray(sorted(answers[k]), dtype=np.int64) for k in keys]
    return queries, answer_lists


def build_batches(queries: np.ndarray, answer_lists: list[np.ndarray], n_entities: int,
                  batch_size: int, label_smoothing: float, rng: np.random.Generator):
    """Shuffled stream of query batches with smoothed multi-hot targets."""
    order = rng.permutation(len(queries))
    eps = label_smoothing
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        targets = np.full((len(idx), n_entities), eps / n_entities)
        for row, qi in enumerate(idx):
            targets[row, answer_lists[qi]] += 1.0 - eps
        yield QueryBatch(queries[idx], targets)


class SGD:
    kind = "sgd"

    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self):
        self.t += 1
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def state_blobs(self):
        return {}

    def load_state(self, meta, blobs):
        self.t = meta["t"]


class Adam:
    kind = "adam"

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_blobs(self):
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, meta, blobs):
        self.t = meta["t"]
        for name in self.params:
            self.m[name] = blobs[f"opt.m.{name}"]
            self.v[name] = blobs[f"opt.v.{name}"]


def _make_optimizer(kind: str, params: dict, lr: float):
    return Adam(params, lr) if kind == "adam" else SGD(params, lr)


def config_digest(encoder_config, decoder_config, train_config) -> str:
    payload = json.dumps(
        {"encoder": asdict(encoder_config), "decoder": asdict(decoder_config),
         "train": asdict(train_config)},
        sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_checkpoint(path, params: dict, optimizer, encoder_config, decoder_config,
                    train_config, rng: np.random.Generator, epoch: int,
                    global_step: int, best_valid_mrr: float | None) -> None:
    """Versioned binary container: JSON header plus named float64 blobs."""
    blobs = {name: p.data for name, p in params.items()}
    blobs.update(optimizer.state_blobs())
    header = {
        "config_digest": config_digest(encoder_config, decoder_config, train_config),
        "encoder_config": asdict(encoder_config),
        "decoder_config": asdict(decoder_config),
        "train_config": asdict(train_config),
        "optimizer": {"kind": optimizer.kind, "lr": optimizer.lr, "t": optimizer.t},
        "rng_state": rng.bit_generator.state,
        "epoch": epoch,
        "global_step": global_step,
        "best_valid_mrr": best_valid_mrr,
        "blobs": [{"name": k, "shape": list(v.shape)} for k, v in blobs.items()],
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(raw)))
        fh.write(raw)
        for spec in header["blobs"]:
            fh.write(np.ascontiguousarray(blobs[spec["name"]], dtype=np.float64).tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header, blobs)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ContractError("not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _CKPT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        blobs = {}
        for spec in header["blobs"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            blobs[spec["name"]] = np.frombuffer(
                fh.read(count * 8), dtype=np.float64).reshape(shape).copy()
    return header, blobs


class Trainer:
    """Owns parameters, optimizer, RNG stream, and the batch loop."""

    def __init__(self, kg: KnowledgeGraph, pgraph: ProximityGraph | None,
                 encoder_config: EncoderConfig, decoder_config: DecoderConfig,
                 train_config: TrainConfig):
        encoder_config.validate()
        decoder_config.validate()
        train_config.validate()
        if encoder_config.dim != decoder_config.dim:
            raise ContractError("encoder and decoder dims differ")
        if not kg.augmented:
            raise ContractError("training requires an augmented knowledge graph")
        self.kg = kg
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.train_config = train_config
        self.prox = None if encoder_config.kg_only else ProximityAdjacency(pgraph)
        self.rng = np.random.Generator(np.random.PCG64(train_config.seed))
        self.params = init_encoder_params(encoder_config, kg.n_entities, kg.n_relations, self.rng)
        self.params.update(init_decoder_params(decoder_config, kg.n_entities, self.rng))
        self.optimizer = _make_optimizer(train_config.optimizer, self.params, train_config.learning_rate)
        self.queries, self.answer_lists = train_query_table(kg)
        self.epoch = 0
        self.global_step = 0
        self.best_valid_mrr = None
        self.best_params = None

    def _zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, batch: QueryBatch) -> float:
        """One optimization step; returns the batch loss."""
        cfg = self.train_config
        keep = sample_edge_dropout(self.kg, int(self.rng.integers(2 ** 62)), cfg.edge_drop_rate)
        adj = RelationalAdjacency(self.kg.train, keep, self.kg.n_entities)
        E_enc, R_enc = encode(self.params, adj, self.prox, self.encoder_config)
        h = ad.gather_rows(E_enc, batch.queries[:, 0])
        r = ad.gather_rows(R_enc, batch.queries[:, 1])
        output = conve_score(h, r, E_enc, self.params, self.decoder_config,
                             training=True, seed=cfg.seed, step=self.global_step)
        loss = bce_loss(output, Tensor(batch.targets))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {self.global_step}")
        self._zero_grads()
        loss.backward()
        self.optimizer.step()
        self.global_step += 1
        return value

    def run_epoch(self) -> float:
        cfg = self.train_config
        losses = []
        for batch in build_batches(self.queries, self.answer_lists, self.kg.n_entities,
                                   cfg.batch_size, cfg.label_smoothing, self.rng):
            losses.append(self.step(batch))
        self.epoch += 1
        return float(np.mean(losses)) if losses else 0.0

    def valid_mrr(self) -> float:
        return evaluation.evaluate(self.params, self.kg, self.prox, self.encoder_config,
                                   self.decoder_config, split="valid")["mrr"]

    def train(self, log_path=None, checkpoint_path=None, quiet=True) -> list[dict]:
        """Runs the configured number of epochs, tracking the best validation MRR."""
        cfg = self.train_config
        log = []
        log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            for _ in range(cfg.epochs):
                t0 = time.perf_counter()
                train_loss = self.run_epoch()
                record = {"epoch": self.epoch, "train_loss": train_loss,
                          "valid_mrr": None, "wall_time": time.perf_counter() - t0}
                if cfg.eval_every and self.epoch % cfg.eval_every == 0 and len(self.kg.valid):
                    mrr = self.valid_mrr()
                    record["valid_mrr"] = mrr
                    if self.best_valid_mrr is None or mrr > self.best_valid_mrr:
                        self.best_valid_mrr = mrr
                        self.best_params = {k: p.data.copy() for k, p in self.params.items()}
                        if checkpoint_path:
                            self.save(checkpoint_path)
                log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                if not quiet:
                    print(f"epoch {record['epoch']}: loss={train_loss:.4f}"
                          + (f" valid_mrr={record['valid_mrr']:.4f}" if record["valid_mrr"] else ""))
            if checkpoint_path and self.best_params is None:
                self.save(checkpoint_path)
        finally:
            if log_fh:
                log_fh.close()
        return log

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.optimizer, self.encoder_config,
                        self.decoder_config, self.train_config, self.rng,
                        self.epoch, self.global_step, self.best_valid_mrr)

    @classmethod
    def restore(cls, path, kg: KnowledgeGraph, pgraph: ProximityGraph | None) -> "Trainer":
        """Rebuild a trainer whose next step is bit-identical to the saved run's."""
        header, blobs = load_checkpoint(path)
        encoder_config = EncoderConfig(**header["encoder_config"])
        decoder_config = DecoderConfig(**header["decoder_config"])
        train_config = TrainConfig(**header["train_config"])
        trainer = cls(kg, pgraph, encoder_config, decoder_config, train_config)
        for name, p in trainer.params.items():
            p.data = blobs[name].copy()
        trainer.optimizer.load_state(header["optimizer"], blobs)
        trainer.rng.bit_generator.state = header["rng_state"]
        trainer.epoch = header["epoch"]
        trainer.global_step = header["global_step"]
        trainer.best_valid_mrr = header["best_valid_mrr"]
        return trainer


def params_from_checkpoint(path) -> tuple[dict, EncoderConfig, DecoderConfig]:
    """Parameter tensors only, for evaluation."""
    header, blobs = load_checkpoint(path)
    params = {spec["name"]: Tensor(blobs[spec["name"]])
              for spec in header["blobs"] if not spec["name"].startswith("opt.")}
    return params, EncoderConfig(**header["encoder_config"]), DecoderConfig(**header["decoder_config"])


def grid_search(kg: KnowledgeGraph, grid: dict, encoder_base: EncoderConfig,
                decoder_base: DecoderConfig, train_base: TrainConfig,
                budget: int | None = None) -> dict:
    """Cartesian sweep over hyper-parameter value sets, ranked by validation MRR.

    Recognized grid keys: batch_size, learning_rate, dim, kg_layers,
    prox_layers, edge_drop_rate, M, I, seed, epochs. Proximity artifacts
    are cached per M and per (M, I) across trials.
    """
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    complete = budget is None or budget >= len(combos)
    if budget is not None:
        combos = combos[:budget]

    qa_index = extract_qa_pairs(kg)
    spm_cache: dict[int, object] = {}
    pgraph_cache: dict[tuple[int, float], ProximityGraph] = {}
    trials = []
    for combo in combos:
        cfg = dict(zip(keys, combo))
        enc = EncoderConfig(**{**asdict(encoder_base),
                               **{k: cfg[k] for k in ("dim", "kg_layers", "prox_layers") if k in cfg}})
        dec = DecoderConfig(**{**{k: v for k, v in asdict(decoder_base).items()
                                  if k not in ("reshape_h", "reshape_w")},
                               **({"dim": cfg["dim"]} if "dim" in cfg else {})})
        trn = TrainConfig(**{**asdict(train_base),
                             **{k: cfg[k] for k in ("batch_size", "learning_rate",
                                                    "edge_drop_rate", "seed", "epochs") if k in cfg}})
        M = int(cfg.get("M", 50))
        I = float(cfg.get("I", 1.0))
        if enc.kg_only:
            pgraph = None
        else:
            if M not in spm_cache:
                spm_cache[M] = accumulate_spm(qa_index, M)
            if (M, I) not in pgraph_cache:
                pgraph_cache[(M, I)] = build_proximity_graph(spm_cache[M], I, kg.n_entities)
            pgraph = pgraph_cache[(M, I)]
        trainer = Trainer(kg, pgraph, enc, dec, trn)
        trainer.train()
        mrr = trainer.valid_mrr() if len(kg.valid) else float("nan")
        trials.append({**cfg, "M": M, "I": I, "seed": trn.seed, "valid_mrr": mrr})
    trials.sort(key=lambda row: (-(row["valid_mrr"] if np.isfinite(row["valid_mrr"]) else -np.inf)))
    return {"trials": trials, "complete": complete}


def write_trial_table(result: dict, path) -> None:
    trials = result["trials"]
    if not trials:
        return
    cols = sorted({k for row in trials for k in row})
    with open(path, "w", encoding="utf-8") as fh:
        if not result["complete"]:
            fh.write("# INCOMPLETE: budget exhausted before covering the grid\n")
        fh.write("\t".join(cols) + "\n")
        for row in trials:
            fh.write("\t".join(repr(row.get(c, "")) for c in cols) + "\n")
