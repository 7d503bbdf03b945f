"""Experiment orchestration: run configuration, deterministic splits, and the
extract -> select -> fine-tune -> evaluate flow behind the CLI.

Every artifact is written with stable key order and stable float formatting,
so a rerun of the same config produces byte-identical files. Wall-clock
timings are the one exception; they live in a separate volatile file that the
manifest does not hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines, selector
from .corpus import (
    ROLE_RESPONSE,
    Instance,
    SynthSpec,
    TokenSequence,
    Tokenizer,
    build_vocab,
    encode_instance,
    load_dataset,
    save_dataset,
    split_words,
    synth_corpus,
)
from .evalmetrics import bleu, greedy_decode, meteor_report, pilot_deciles, rouge_report
from .gradstats import NORM_MODES, GradientRecord, aggregate_all, read_records, write_records
from .rng import ROLE_SPLIT, substream
from .selector import STRATEGIES, SelectionResult, attach_strata, select_strategy
from .tinylm import (
    Model,
    ModelConfig,
    TrainHyper,
    Trainer,
    extract_epoch,
    init_model,
    load_checkpoint,
    model_fingerprint,
    save_checkpoint,
    total_update_steps,
    train_steps,
)

# Baseline families the compare/baseline commands accept alongside the
# density strategies. rds/less/ppl need a reference model for features.
BASELINE_NAMES = ("random", "bm25", "dsir", "rds", "less", "ppl")
MODEL_BASELINES = ("rds", "less", "ppl")

EXTRACTION_MODES = ("frozen", "online")

RECORDS_FILE = "records.jsonl"
EXTRACT_META_FILE = "extract_meta.json"
EXTRACT_MODEL_FILE = "extract_model.json"
MANIFEST_FILE = "manifest.json"
TIMINGS_FILE = "timings.json"


@dataclass(frozen=True)
class RunConfig:
    """Flat experiment configuration mirrored by the JSON config file."""

    dataset: str
    out_dir: str
    seed: int = 42

    # tokenizer
    max_vocab: int = 512
    max_seq_len: int = 48

    # model
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    tie_lm_head: bool = False
    lm_grad_space: str = "logits"

    # optimization
    learning_rate: float = 3e-3
    warmup_ratio: float = 0.1
    batch_size: int = 8
    epochs: int = 3

    # extraction
    mode: str = "frozen"
    warmup_steps: int = 200
    norm_mode: str = "mean_of_norms"

    # selection
    strategy: str = "grads"
    fraction: float = 50.0

    # splits and baseline inputs
    test_fraction: float = 0.1
    query_size: int = 16
    bm25_aggregate: str = "mean"
    projection_dim: int | None = None

    # comparison protocol
    compare_epochs: int = 3

    def validate(self) -> None:
        if not os.path.isfile(self.dataset):
            raise ValueError(f"dataset not found: {self.dataset}")
        if self.mode not in EXTRACTION_MODES:
            raise ValueError(f"unknown extraction mode {self.mode!r}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")
        if not 0.0 < self.fraction <= 100.0:
            raise ValueError("fraction must lie in (0, 100]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.query_size < 0 or self.warmup_steps < 0:
            raise ValueError("query_size and warmup_steps must be >= 0")
        if self.strategy not in STRATEGIES + BASELINE_NAMES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.compare_epochs < 1:
            raise ValueError("compare_epochs must be >= 1")
        self.train_hyper().validate()

    def model_config(self, vocab_size: int) -> ModelConfig:
        cfg = ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            vocab_size=vocab_size,
            max_seq_len=self.max_seq_len,
            init_seed=self.seed,
            tie_lm_head=self.tie_lm_head,
            lm_grad_space=self.lm_grad_space,
        )
        cfg.validate()
        return cfg

    def train_hyper(self, epochs: int | None = None) -> TrainHyper:
        return TrainHyper(
            learning_rate=self.learning_rate,
            warmup_ratio=self.warmup_ratio,
            batch_size=self.batch_size,
            epochs=self.epochs if epochs is None else epochs,
            shuffle_seed=self.seed,
        )

    def public_dict(self) -> dict:
        """Config echo for metadata files; excludes output location."""
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.pop("out_dir")
        return d


_CONFIG_FIELDS = set(RunConfig.__dataclass_fields__)


def load_config(path: str, **overrides) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = set(raw) - _CONFIG_FIELDS
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if "dataset" not in raw or "out_dir" not in raw:
        raise ValueError("config must provide dataset and out_dir")
    cfg = RunConfig(**raw)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# artifact helpers


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out_dir: str, filenames: list[str]) -> str:
    """Hash every deterministic artifact of a command run.

    Entries accumulate across commands sharing one output directory; a
    rehashed file simply replaces its previous entry.
    """
    path = os.path.join(out_dir, MANIFEST_FILE)
    entries: dict[str, str] = {}
    if os.path.isfile(path):
        with open(path, encoding="utf-8") as fh:
            entries = json.load(fh).get("files", {})
    for name in filenames:
        entries[name] = sha256_file(os.path.join(out_dir, name))
    write_json(path, {"files": entries})
    return path


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# dataset preparation and splits


@dataclass(frozen=True)
class SplitIds:
    train: tuple[str, ...]
    test: tuple[str, ...]
    query: tuple[str, ...]


def split_dataset(
    instances: list[Instance],
    seed: int,
    test_fraction: float = 0.1,
    query_size: int = 16,
) -> SplitIds:
    """Deterministic id-level split; held-out slots are filled domain-first.

    The query split feeds similarity baselines; the test split is the eval
    set. Both prefer labeled domain instances so evaluation probes the shared
    fact table; unlabeled corpora fall back to the plain shuffled order.
    """
    n = len(instances)
    if n == 0:
        raise ValueError("empty dataset")
    n_test = int(round(test_fraction * n))
    if query_size + n_test >= n:
        raise ValueError("dataset too small for the requested splits")
    rng = substream(seed, ROLE_SPLIT)
    order = list(range(n))
    rng.shuffle(order)
    preferred = [i for i in order if instances[i].stratum == "domain"]
    rest = [i for i in order if instances[i].stratum != "domain"]
    held = preferred + rest
    query = held[:query_size]
    test = held[query_size : query_size + n_test]
    chosen = set(query) | set(test)
    train = [i for i in range(n) if i not in chosen]
    return SplitIds(
        train=tuple(instances[i].id for i in train),
        test=tuple(instances[i].id for i in test),
        query=tuple(instances[i].id for i in query),
    )


@dataclass
class Prepared:
    """Loaded corpus plus everything derived deterministically from it."""

    instances: list[Instance]
    tok: Tokenizer
    seqs: list[TokenSequence]
    split: SplitIds
    dataset_hash: str

    @property
    def by_id(self) -> dict[str, int]:
        return {inst.id: i for i, inst in enumerate(self.instances)}

    def seqs_for(self, ids) -> list[TokenSequence]:
        index = self.by_id
        return [self.seqs[index[i]] for i in ids]

    def instances_for(self, ids) -> list[Instance]:
        index = self.by_id
        return [self.instances[index[i]] for i in ids]

    def strata(self) -> dict[str, str | None]:
        return {inst.id: inst.stratum for inst in self.instances}


def prepare(cfg: RunConfig) -> Prepared:
    cfg.validate()
    instances = load_dataset(cfg.dataset)
    tok = build_vocab(instances, cfg.max_vocab)
    seqs = [encode_instance(tok, inst, cfg.max_seq_len) for inst in instances]
    split = split_dataset(instances, cfg.seed, cfg.test_fraction, cfg.query_size)
    return Prepared(
        instances=instances,
        tok=tok,
        seqs=seqs,
        split=split,
        dataset_hash=sha256_file(cfg.dataset),
    )


# ---------------------------------------------------------------------------
# extraction


def build_reference_model(cfg: RunConfig, prep: Prepared) -> Model:
    """Fresh init plus the configured warmup; the model gradients are
    measured against (and the feature source for rds/less/ppl)."""
    model = init_model(cfg.model_config(prep.tok.vocab_size))
    if cfg.warmup_steps:
        train_steps(model, prep.seqs, cfg.train_hyper(), cfg.warmup_steps)
    return model


def run_extract(cfg: RunConfig, prep: Prepared | None = None) -> dict:
    """Gradient records for every instance in the dataset file."""
    t0 = time.perf_counter()
    prep = prep or prepare(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    model = build_reference_model(cfg, prep)
    model, bundles = extract_epoch(model, prep.seqs, cfg.train_hyper(epochs=1), cfg.mode)
    seqs_by_id = {s.instance_id: s for s in prep.seqs}
    fingerprint = model_fingerprint(model.cfg)
    records = aggregate_all(bundles, seqs_by_id, fingerprint, cfg.norm_mode)

    records_path = os.path.join(cfg.out_dir, RECORDS_FILE)
    write_records(records, records_path)
    model_path = os.path.join(cfg.out_dir, EXTRACT_MODEL_FILE)
    save_checkpoint(model, model_path)
    meta = {
        "config": cfg.public_dict(),
        "dataset_hash": prep.dataset_hash,
        "model_fingerprint": fingerprint,
        "n_records": len(records),
        "vocab_size": prep.tok.vocab_size,
    }
    meta_path = os.path.join(cfg.out_dir, EXTRACT_META_FILE)
    write_json(meta_path, meta)
    write_manifest(cfg.out_dir, [RECORDS_FILE, EXTRACT_META_FILE, EXTRACT_MODEL_FILE])
    write_json(
        os.path.join(cfg.out_dir, TIMINGS_FILE),
        {"extract_seconds": time.perf_counter() - t0},
    )
    return {
        "records": records_path,
        "model": model_path,
        "meta": meta_path,
        "n_records": len(records),
    }


def check_provenance(records_path: str, prep: Prepared, force: bool) -> None:
    """Refuse records whose sidecar metadata points at a different dataset."""
    meta_path = os.path.join(os.path.dirname(records_path) or ".", EXTRACT_META_FILE)
    if not os.path.isfile(meta_path):
        if force:
            return
        raise RuntimeError(
            f"no provenance metadata next to {records_path} (rerun extract, or force)"
        )
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("dataset_hash") != prep.dataset_hash and not force:
        raise RuntimeError(
            "provenance mismatch: records were extracted from a different "
            "dataset (pass force to override)"
        )


# ---------------------------------------------------------------------------
# selection


def write_selection(
    result: SelectionResult,
    path: str,
    records_by_id: dict[str, GradientRecord] | None = None,
) -> None:
    """Rank-ordered JSONL; one line per selected instance."""
    lines = []
    for rank, inst_id in enumerate(result.ordered_ids, start=1):
        f_val = result.f_values.get(inst_id)
        rec = records_by_id.get(inst_id) if records_by_id else None
        row = [
            f'"id": {json.dumps(inst_id)}',
            f'"rank": {rank}',
            f'"f_value": {"null" if f_val is None else _fmt(f_val)}',
            f'"g_grads": {"null" if rec is None else _fmt(rec.g_grads)}',
        ]
        lines.append("{" + ", ".join(row) + "}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def selection_meta(
    result: SelectionResult, records_path: str | None, records_hash: str | None
) -> dict:
    return {
        "strategy": result.strategy,
        "fraction_percent": result.fraction_percent,
        "n_selected": len(result.selected_ids),
        "bandwidth": result.bandwidth,
        "tie_break": result.tie_break,
        "seed": result.seed,
        "stratum_counts": result.stratum_counts,
        "records_file": os.path.basename(records_path) if records_path else None,
        "records_hash": records_hash,
    }


def run_select(
    cfg: RunConfig,
    records_path: str,
    strategy: str | None = None,
    fraction: float | None = None,
    force: bool = False,
) -> SelectionResult:
    """Density/value selection over a gradient-record file."""
    prep = prepare(cfg)
    check_provenance(records_path, prep, force)
    strategy = strategy or cfg.strategy
    fraction = cfg.fraction if fraction is None else fraction
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    records = read_records(records_path)
    result = attach_strata(select_strategy(records, strategy, fraction), prep.strata())

    os.makedirs(cfg.out_dir, exist_ok=True)
    sel_file = f"selection_{strategy}.jsonl"
    write_selection(
        result,
        os.path.join(cfg.out_dir, sel_file),
        {r.instance_id: r for r in records},
    )
    meta = selection_meta(result, records_path, sha256_file(records_path))
    meta["dataset_hash"] = prep.dataset_hash
    meta_file = f"selection_{strategy}_meta.json"
    write_json(os.path.join(cfg.out_dir, meta_file), meta)
    write_manifest(cfg.out_dir, [sel_file, meta_file])
    return result


def _query_words(prep: Prepared) -> list[list[str]]:
    return [
        split_words(inst.prompt + " " + inst.response)
        for inst in prep.instances_for(prep.split.query)
    ]


def run_selection_by_name(
    name: str,
    fraction: float,
    pool_records: list[GradientRecord],
    prep: Prepared,
    cfg: RunConfig,
    ref_model: Model | None,
) -> SelectionResult:
    """Dispatch a density strategy or a baseline over the training pool."""
    if name in STRATEGIES:
        return select_strategy(pool_records, name, fraction)
    if name not in BASELINE_NAMES:
        raise ValueError(f"unknown strategy {name!r}")
    pool_ids = [r.instance_id for r in pool_records]
    if name == "random":
        return baselines.select_random(pool_ids, fraction, cfg.seed)
    if name in ("bm25", "dsir"):
        cand_words = [
            split_words(inst.prompt + " " + inst.response)
            for inst in prep.instances_for(pool_ids)
        ]
        query_words = _query_words(prep)
        if not query_words:
            raise ValueError(f"{name} needs a nonempty query split")
        if name == "bm25":
            return baselines.bm25_select(
                pool_ids, cand_words, query_words, fraction, cfg.bm25_aggregate
            )
        return baselines.dsir_select(pool_ids, cand_words, query_words, fraction, cfg.seed)
    if ref_model is None:
        raise ValueError(f"{name} needs a reference model")
    pool_seqs = prep.seqs_for(pool_ids)
    if name == "ppl":
        ppls = baselines.sequence_perplexities(ref_model, pool_seqs)
        return baselines.ppl_select(pool_ids, ppls, fraction)
    query_seqs = prep.seqs_for(prep.split.query)
    if not query_seqs:
        raise ValueError(f"{name} needs a nonempty query split")
    if name == "rds":
        return baselines.rds_select(
            baselines.representation_features(ref_model, pool_seqs),
            baselines.representation_features(ref_model, query_seqs),
            fraction,
        )
    return baselines.less_select(
        baselines.gradient_features(ref_model, pool_seqs),
        baselines.gradient_features(ref_model, query_seqs),
        fraction,
        cfg.projection_dim,
        cfg.seed,
    )


def run_baseline(
    cfg: RunConfig,
    name: str,
    records_path: str,
    fraction: float | None = None,
    model_path: str | None = None,
    force: bool = False,
) -> SelectionResult:
    """Baseline selection over the same candidate set as run_select."""
    prep = prepare(cfg)
    check_provenance(records_path, prep, force)
    fraction = cfg.fraction if fraction is None else fraction
    if name not in BASELINE_NAMES:
        raise ValueError(f"unknown baseline {name!r}")
    records = read_records(records_path)
    ref_model = None
    if name in MODEL_BASELINES:
        default_model = os.path.join(
            os.path.dirname(records_path) or ".", EXTRACT_MODEL_FILE
        )
        model_path = model_path or (
            default_model if os.path.isfile(default_model) else None
        )
        if model_path is None:
            raise ValueError(f"{name} needs a reference model checkpoint")
        ref_model = load_checkpoint(model_path)
    result = attach_strata(
        run_selection_by_name(name, fraction, records, prep, cfg, ref_model),
        prep.strata(),
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    sel_file = f"selection_{name}.jsonl"
    write_selection(
        result,
        os.path.join(cfg.out_dir, sel_file),
        {r.instance_id: r for r in records},
    )
    meta = selection_meta(result, records_path, sha256_file(records_path))
    meta["dataset_hash"] = prep.dataset_hash
    meta_file = f"selection_{name}_meta.json"
    write_json(os.path.join(cfg.out_dir, meta_file), meta)
    write_manifest(cfg.out_dir, [sel_file, meta_file])
    return result


def read_selection_ids(path: str) -> list[str]:
    ids: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                ids.append(json.loads(line)["id"])
    if not ids:
        raise ValueError(f"empty selection file: {path}")
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate ids in selection file: {path}")
    return ids


# ---------------------------------------------------------------------------
# fine-tuning and evaluation


def fine_tune(
    cfg: RunConfig,
    prep: Prepared,
    train_ids: list[str],
    epochs: int,
    on_epoch=None,
) -> Model:
    """Fresh model from the configured init seed, trained on the given ids.

    Subsets are always presented in sorted-id order so that an identity
    selection reproduces full-data training exactly.
    """
    seqs = prep.seqs_for(sorted(train_ids))
    if not seqs:
        raise ValueError("no training instances")
    model = init_model(cfg.model_config(prep.tok.vocab_size))
    hyper = cfg.train_hyper(epochs=epochs)
    trainer = Trainer(model, hyper, total_update_steps(len(seqs), hyper))
    trainer.run_epochs(seqs, on_epoch=on_epoch)
    model.epoch_losses = trainer.epoch_losses
    return model


def evaluate_model(model: Model, prep: Prepared, ids) -> dict:
    """Greedy-decode the prompts of ids and score against their responses.

    Response-only training never teaches the stop token, so decoding uses a
    budget equal to the reference length; clipped precision then measures
    content fidelity uniformly across strategies.
    """
    tok = prep.tok
    cands: list[list[str]] = []
    refs: list[list[str]] = []
    for seq in prep.seqs_for(ids):
        sep_pos = seq.tokens.index(tok.sep)
        prompt = list(seq.tokens[: sep_pos + 1])
        ref = [
            tok.id_to_token[t]
            for t, r in zip(seq.tokens, seq.roles)
            if r == ROLE_RESPONSE
        ]
        out = greedy_decode(model, prompt, max_new=len(ref))
        cands.append([tok.id_to_token[t] for t in out])
        refs.append(ref)
    return {
        "bleu": bleu(cands, refs).corpus_score,
        "rouge_l": rouge_report(cands, refs).corpus_score,
        "meteor": meteor_report(cands, refs).corpus_score,
    }


METRIC_KEYS = ("bleu", "rouge_l", "meteor")


def run_train(
    cfg: RunConfig,
    selection_path: str | None = None,
    force: bool = False,
) -> dict:
    """Fine-tune a fresh model on a selection (or the full training pool)."""
    prep = prepare(cfg)
    pool = set(prep.split.train)
    if selection_path is None:
        train_ids = sorted(pool)
        selection_hash = None
    else:
        meta_path = os.path.splitext(selection_path)[0] + "_meta.json"
        if os.path.isfile(meta_path):
            with open(meta_path, encoding="utf-8") as fh:
                meta = json.load(fh)
            if meta.get("dataset_hash") not in (None, prep.dataset_hash) and not force:
                raise RuntimeError(
                    "provenance mismatch: selection belongs to a different "
                    "dataset (pass force to override)"
                )
        ids = read_selection_ids(selection_path)
        train_ids = sorted(i for i in ids if i in pool)
        if not train_ids:
            raise ValueError("selection contains no training-pool instances")
        selection_hash = sha256_file(selection_path)
    t0 = time.perf_counter()
    model = fine_tune(cfg, prep, train_ids, cfg.epochs)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_file = "model.json"
    save_checkpoint(model, os.path.join(cfg.out_dir, ckpt_file))
    meta = {
        "config": cfg.public_dict(),
        "dataset_hash": prep.dataset_hash,
        "selection_hash": selection_hash,
        "n_train": len(train_ids),
        "epochs": cfg.epochs,
        "epoch_losses": list(getattr(model, "epoch_losses", [])),
    }
    meta_file = "train_meta.json"
    write_json(os.path.join(cfg.out_dir, meta_file), meta)
    write_manifest(cfg.out_dir, [ckpt_file, meta_file])
    write_json(
        os.path.join(cfg.out_dir, TIMINGS_FILE),
        {"train_seconds": time.perf_counter() - t0},
    )
    return meta


def run_eval(cfg: RunConfig, model_path: str) -> dict:
    """Score a checkpoint on the held-out test split."""
    prep = prepare(cfg)
    model = load_checkpoint(model_path)
    if model.cfg.vocab_size != prep.tok.vocab_size:
        raise RuntimeError(
            "checkpoint vocabulary does not match the dataset tokenizer"
        )
    metrics = evaluate_model(model, prep, prep.split.test)
    out = {
        "metrics": metrics,
        "n_test": len(prep.split.test),
        "dataset_hash": prep.dataset_hash,
        "model_file": os.path.basename(model_path),
        "model_hash": sha256_file(model_path),
    }
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_json(os.path.join(cfg.out_dir, "eval.json"), out)
    write_manifest(cfg.out_dir, ["eval.json"])
    return out


# ---------------------------------------------------------------------------
# pilot deciles


def run_pilot(
    cfg: RunConfig,
    records_path: str | None = None,
    model_path: str | None = None,
    force: bool = False,
) -> dict:
    """Decile report over gradient records, CSV for plotting."""
    prep = prepare(cfg)
    if records_path is None:
        extract = run_extract(cfg, prep)
        records_path = extract["records"]
        model_path = model_path or extract["model"]
    else:
        check_provenance(records_path, prep, force)
        default_model = os.path.join(
            os.path.dirname(records_path) or ".", EXTRACT_MODEL_FILE
        )
        if model_path is None and os.path.isfile(default_model):
            model_path = default_model
    records = read_records(records_path)
    if model_path is None:
        base_model = init_model(cfg.model_config(prep.tok.vocab_size))
    else:
        base_model = load_checkpoint(model_path)
    report = pilot_deciles(records, prep.seqs, base_model)
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "deciles.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    meta = {
        "loss_gradient_spearman": report.loss_gradient_spearman,
        "mean_gradient": list(report.mean_gradient),
        "records_hash": sha256_file(records_path),
        "dataset_hash": prep.dataset_hash,
    }
    write_json(os.path.join(cfg.out_dir, "pilot_meta.json"), meta)
    write_manifest(cfg.out_dir, ["deciles.csv", "pilot_meta.json"])
    return meta


# ---------------------------------------------------------------------------
# comparison experiment


@dataclass
class ExperimentReport:
    """Strategy-vs-metric table plus provenance and volatile timings."""

    rows: list[dict]
    dataset_hash: str
    records_hash: str
    split_sizes: dict[str, int]
    timings: dict[str, float] = field(default_factory=dict)

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["row"] == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "dataset_hash": self.dataset_hash,
            "records_hash": self.records_hash,
            "split_sizes": self.split_sizes,
        }


def gradient_percentile_summary(
    selected_ids, pool_records: list[GradientRecord]
) -> dict[str, float]:
    """Where the selected g_grads sit inside the pool distribution (0-100)."""
    values = np.array([r.g_grads for r in pool_records])
    order = np.sort(values)
    chosen = set(selected_ids)
    picked = np.array([r.g_grads for r in pool_records if r.instance_id in chosen])
    lo = np.searchsorted(order, picked, side="left")
    hi = np.searchsorted(order, picked, side="right")
    pct = 100.0 * (lo + hi) / (2.0 * values.size)
    return {
        "min": float(pct.min()),
        "p25": float(np.percentile(pct, 25)),
        "p50": float(np.percentile(pct, 50)),
        "p75": float(np.percentile(pct, 75)),
        "max": float(pct.max()),
    }


def _finished_row(name: str, metrics_per_epoch: list[dict], n_train: int) -> dict:
    row = {
        "row": name,
        "n_train": n_train,
        "per_epoch": metrics_per_epoch,
        "error": None,
    }
    for key in METRIC_KEYS:
        row[key] = float(np.mean([m[key] for m in metrics_per_epoch]))
    return row


def _train_and_eval_row(
    name: str, cfg: RunConfig, prep: Prepared, train_ids, epochs: int
) -> dict:
    seqs = prep.seqs_for(sorted(train_ids))
    if not seqs:
        raise ValueError("no training instances")
    model = init_model(cfg.model_config(prep.tok.vocab_size))
    snapshots: list[dict] = []

    def snap(_epoch: int) -> None:
        snapshots.append(evaluate_model(model, prep, prep.split.test))

    hyper = cfg.train_hyper(epochs=epochs)
    trainer = Trainer(model, hyper, total_update_steps(len(seqs), hyper))
    trainer.run_epochs(seqs, on_epoch=snap)
    return _finished_row(name, snapshots, len(train_ids))


def run_compare(
    cfg: RunConfig,
    strategies: list[str],
    fractions: list[float],
    records_path: str | None = None,
    force: bool = False,
) -> ExperimentReport:
    """Strategy sweep: base row, full-data row, one row per (strategy, N).

    Fine-tuning always starts from a fresh model at the configured init seed;
    metrics are averaged over the first compare_epochs epochs.
    """
    t_start = time.perf_counter()
    prep = prepare(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    for name in strategies:
        if name not in STRATEGIES + BASELINE_NAMES:
            raise ValueError(f"unknown strategy {name!r}")
    for frac in fractions:
        if not 0.0 < frac <= 100.0:
            raise ValueError("fraction must lie in (0, 100]")

    timings: dict[str, float] = {}
    produced: list[str] = []

    t0 = time.perf_counter()
    ref_model: Model | None
    if records_path is None:
        extract = run_extract(cfg, prep)
        records_path = extract["records"]
        ref_model = load_checkpoint(extract["model"])
        produced += [RECORDS_FILE, EXTRACT_META_FILE, EXTRACT_MODEL_FILE]
    else:
        check_provenance(records_path, prep, force)
        sibling = os.path.join(os.path.dirname(records_path) or ".", EXTRACT_MODEL_FILE)
        ref_model = load_checkpoint(sibling) if os.path.isfile(sibling) else None
    records = read_records(records_path)
    records_hash = sha256_file(records_path)
    timings["extract"] = time.perf_counter() - t0

    pool = set(prep.split.train)
    pool_records = [r for r in records if r.instance_id in pool]
    missing = pool - {r.instance_id for r in pool_records}
    if missing:
        raise RuntimeError(
            f"records do not cover the training pool ({len(missing)} missing)"
        )
    records_by_id = {r.instance_id: r for r in pool_records}
    epochs = cfg.compare_epochs
    rows: list[dict] = []

    t0 = time.perf_counter()
    base_model = init_model(cfg.model_config(prep.tok.vocab_size))
    base_metrics = evaluate_model(base_model, prep, prep.split.test)
    base_row = {"row": "base", "n_train": 0, "per_epoch": [], "error": None}
    base_row.update({k: base_metrics[k] for k in METRIC_KEYS})
    rows.append(base_row)
    timings["base"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rows.append(
        _train_and_eval_row("all", cfg, prep, sorted(pool), epochs)
    )
    timings["all"] = time.perf_counter() - t0

    for name in strategies:
        for frac in fractions:
            row_name = f"{name}@{frac:g}"
            t0 = time.perf_counter()
            try:
                result = attach_strata(
                    run_selection_by_name(
                        name, frac, pool_records, prep, cfg, ref_model
                    ),
                    prep.strata(),
                )
                sel_file = f"selection_{name}_{frac:g}.jsonl"
                sel_path = os.path.join(cfg.out_dir, sel_file)
                write_selection(result, sel_path, records_by_id)
                meta = selection_meta(result, records_path, records_hash)
                meta["dataset_hash"] = prep.dataset_hash
                meta_file = f"selection_{name}_{frac:g}_meta.json"
                write_json(os.path.join(cfg.out_dir, meta_file), meta)
                produced += [sel_file, meta_file]

                row = _train_and_eval_row(
                    row_name, cfg, prep, list(result.selected_ids), epochs
                )
                row["strategy"] = name
                row["fraction_percent"] = frac
                row["stratum_counts"] = result.stratum_counts
                row["gradient_percentiles"] = gradient_percentile_summary(
                    result.selected_ids, pool_records
                )
                row["selection_file"] = sel_file
                row["selection_hash"] = sha256_file(sel_path)
            except (ValueError, RuntimeError) as exc:
                row = {"row": row_name, "strategy": name, "fraction_percent": frac,
                       "error": str(exc)}
            rows.append(row)
            timings[row_name] = time.perf_counter() - t0

    timings["total"] = time.perf_counter() - t_start
    report = ExperimentReport(
        rows=rows,
        dataset_hash=prep.dataset_hash,
        records_hash=records_hash,
        split_sizes={
            "train": len(prep.split.train),
            "test": len(prep.split.test),
            "query": len(prep.split.query),
        },
        timings=timings,
    )
    write_json(os.path.join(cfg.out_dir, "report.json"), report.to_dict())
    write_json(os.path.join(cfg.out_dir, TIMINGS_FILE), timings)
    write_manifest(cfg.out_dir, produced + ["report.json"])
    return report


# ---------------------------------------------------------------------------
# synthetic corpus generation


def run_synth(
    out_dir: str,
    n_domain: int = 700,
    n_noise: int = 150,
    n_trivial: int = 150,
    seed: int = 42,
) -> str:
    """Write a labeled synthetic corpus and its manifest; returns the path."""
    instances = synth_corpus(SynthSpec(n_domain, n_noise, n_trivial, seed))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "dataset.jsonl")
    save_dataset(instances, path)
    write_manifest(out_dir, ["dataset.jsonl"])
    return path
