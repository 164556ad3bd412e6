"""Experiment orchestration: config, file-backed pipeline stages and reports.

A run lives in one output directory::

    corpus/      vocab.tsv, train.tsv + test.tsv (pia) or train_pairs.tsv + test_pairs.tsv (rra)
    profile/     train.fp, test.fp       ground-truth footprints
    traces/      <channel>.mtrc          simulated side-channel traces of the test set
    translated/  <channel>.fp            footprints recovered from the traces
    models/      pia.model | rra.model
    attack/      <source>.tsv            predictions, source = direct or a channel
    reports/     evaluate.csv, ttest.csv

Every stage reads its inputs from files written by earlier stages, so stages
can be run one at a time and give the same bytes as a full run. Profiling
always uses ground-truth footprints; only the attack phase sees translated
ones.

Config file (INI style, one level of sections)::

    [experiment]  name, seed, workers, out
    [model]       preset = toy | lite-shape
    [attack]      kind = pia | rra, attribute = illness | gender | age | blood
    [corpus]      length_class, train_templates, test_templates, unstructured,
                  n_train, n_test, domains, test_domains, train_fraction, max_pairs
    [channel]     names = l1l2, perf, pageout, tlb (comma separated), contention = 0..4
    [train]       epochs, lr, momentum, batch_size, optimizer, hidden, l2, max_iter
    [ttest]       illness_a, illness_b, n
"""
from __future__ import annotations

import configparser
import csv
import io as _io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import channels as ch
from . import io
from . import translate as tr
from .attacks import (PiaHyper, ProfilingDataset, RraHyper, featurize_load, featurize_sequence, infer_pia,
                      infer_rra, train_pia, train_rra)
from .corpus import (ATTRIBUTE_CARDINALITY, DOMAINS, build_pia_dataset, build_rra_corpus, health_vocabulary,
                     load_domain_text, load_templates, rra_vocabulary, sample_record, _derived_rng)
from .moe import PRESETS, ConfigError, ExpertFootprint, build_model, preset
from .stats import pearson, sequence_accuracy, token_asr, topk_accuracy, welch_t

LOAD_CHANNELS = ("l1l2", "perf")
SEQUENCE_CHANNELS = ("pageout", "tlb")
ALL_CHANNELS = LOAD_CHANNELS + SEQUENCE_CHANNELS
STAGES = ("generate-corpus", "profile", "simulate", "translate", "train", "attack", "evaluate")
_STAGE_CODE = {"simulate": 3, "ttest": 9}
_CHANNEL_CODE = {c: i for i, c in enumerate(ALL_CHANNELS)}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- config --------------------------------------------------------------------------


def _ints(text: str) -> tuple[int, ...] | None:
    """Parse "all", "0-4", "1,3,5" or "0-2,7" into template ids."""
    text = text.strip()
    if text in ("", "all"):
        return None
    out = []
    for part in text.split(","):
        a, sep, b = part.strip().partition("-")
        out.extend(range(int(a), int(b) + 1) if sep else [int(a)])
    return tuple(out)


def _names(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    workers: int = 1
    out: Path = Path("runs/experiment")
    preset: str = "toy"
    attack: str = "pia"
    attribute: str = "illness"
    length_class: str = "short"
    train_templates: tuple[int, ...] | None = None
    test_templates: tuple[int, ...] | None = None
    unstructured: bool = False
    n_train: int = 8000
    n_test: int = 2000
    domains: tuple[str, ...] = ("general",)
    test_domains: tuple[str, ...] | None = None
    train_fraction: float = 0.9
    max_pairs: int | None = None
    channels: tuple[str, ...] = ("l1l2",)
    contention: int = 0
    pia: PiaHyper = field(default_factory=PiaHyper)
    rra: RraHyper = field(default_factory=RraHyper)
    illness_a: int = 0
    illness_b: int = 1
    ttest_n: int = 100

    def validate(self) -> "ExperimentConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown model preset {self.preset!r}")
        if self.attack not in ("pia", "rra"):
            raise ConfigError("attack kind must be pia or rra")
        if self.attribute not in ATTRIBUTE_CARDINALITY:
            raise ConfigError(f"unknown attribute {self.attribute!r}")
        if self.length_class not in ("short", "long", "any"):
            raise ConfigError("length_class must be short, long or any")
        for c in self.channels:
            if c not in ALL_CHANNELS:
                raise ConfigError(f"unknown channel {c!r}; choose from {ALL_CHANNELS}")
        wanted = LOAD_CHANNELS if self.attack == "pia" else SEQUENCE_CHANNELS
        bad = [c for c in self.channels if c not in wanted]
        if bad:
            raise ConfigError(f"{self.attack} attacks need {'/'.join(wanted)} channels, got {bad}")
        for d in self.domains + (self.test_domains or ()):
            if d not in DOMAINS:
                raise ConfigError(f"unknown domain {d!r}")
        if self.contention not in ch.CONTENTION_LEVELS:
            raise ConfigError("contention must be 0..4")
        if self.n_train < 1 or self.n_test < 1 or self.workers < 1:
            raise ConfigError("sizes and worker count must be positive")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        return self

    @property
    def model_config(self):
        return preset(self.preset)

    @property
    def noise(self) -> ch.NoiseModel:
        return ch.NoiseModel.for_contention(self.contention)


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Build a config from INI text; keyword overrides (e.g. from CLI flags) win."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None

    def get(section, key, conv=str, default=None):
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            try:
                return conv(raw)
            except ValueError:
                raise ConfigError(f"[{section}] {key} = {raw!r} is not valid") from None
        return default

    def flag(raw):
        if raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)

    d = ExperimentConfig()
    pia = PiaHyper(
        hidden=get("train", "hidden", lambda s: tuple(int(v) for v in s.split(",")), d.pia.hidden),
        batch_size=get("train", "batch_size", int, d.pia.batch_size),
        lr=get("train", "lr", float, d.pia.lr),
        momentum=get("train", "momentum", float, d.pia.momentum),
        epochs=get("train", "epochs", int, d.pia.epochs),
        optimizer=get("train", "optimizer", str, d.pia.optimizer),
    )
    rra = RraHyper(l2=get("train", "l2", float, d.rra.l2), max_iter=get("train", "max_iter", int, d.rra.max_iter))
    name = get("experiment", "name", str, d.name)
    test_domains = get("corpus", "test_domains", _names, None)
    cfg = ExperimentConfig(
        name=name,
        seed=get("experiment", "seed", int, d.seed),
        workers=get("experiment", "workers", int, d.workers),
        out=Path(get("experiment", "out", str, f"runs/{name}")),
        preset=get("model", "preset", str, d.preset),
        attack=get("attack", "kind", str, d.attack),
        attribute=get("attack", "attribute", str, d.attribute),
        length_class=get("corpus", "length_class", str, d.length_class),
        train_templates=get("corpus", "train_templates", _ints, None),
        test_templates=get("corpus", "test_templates", _ints, None),
        unstructured=get("corpus", "unstructured", flag, d.unstructured),
        n_train=get("corpus", "n_train", int, d.n_train),
        n_test=get("corpus", "n_test", int, d.n_test),
        domains=get("corpus", "domains", _names, d.domains),
        test_domains=test_domains,
        train_fraction=get("corpus", "train_fraction", float, d.train_fraction),
        max_pairs=get("corpus", "max_pairs", int, None),
        channels=get("channel", "names", _names, d.channels),
        contention=get("channel", "contention", int, d.contention),
        pia=pia,
        rra=rra,
        illness_a=get("ttest", "illness_a", int, d.illness_a),
        illness_b=get("ttest", "illness_b", int, d.illness_b),
        ttest_n=get("ttest", "n", int, d.ttest_n),
    )
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if "seed" in overrides:
        seed = overrides["seed"]
        overrides["pia"] = replace(cfg.pia, seed=seed)
        overrides["rra"] = replace(cfg.rra, seed=seed)
    if "out" in overrides:
        overrides["out"] = Path(overrides["out"])
    cfg = replace(cfg, **overrides)
    if "seed" not in overrides:
        cfg = replace(cfg, pia=replace(cfg.pia, seed=cfg.seed), rra=replace(cfg.rra, seed=cfg.seed))
    return cfg.validate()


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, **overrides)


# -- reports ----------------------------------------------------------------------------


REPORT_HEADER = ("experiment", "metric", "value", "n", "seed")


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    metric: str
    value: float
    n: int
    seed: int


@dataclass
class Report:
    rows: list[ReportRow] = field(default_factory=list)

    def add(self, experiment: str, metric: str, value: float, n: int, seed: int) -> None:
        self.rows.append(ReportRow(experiment, metric, float(value), int(n), int(seed)))

    def extend(self, other: "Report") -> None:
        self.rows.extend(other.rows)

    def get(self, experiment: str, metric: str) -> float:
        for r in self.rows:
            if r.experiment == experiment and r.metric == metric:
                return r.value
        raise KeyError((experiment, metric))

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.experiment, r.metric, format(r.value, ".17g"), r.n, r.seed])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Report":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows or tuple(rows[0]) != REPORT_HEADER:
            raise io.FormatError(f"{path} is not a report CSV")
        rep = cls()
        for r in rows[1:]:
            rep.add(r[0], r[1], float(r[2]), int(r[3]), int(r[4]))
        return rep


def aggregate_reports(directory) -> Report:
    """Concatenate every report CSV under ``directory`` in path order."""
    rep = Report()
    for p in sorted(Path(directory).rglob("*.csv")):
        if p.parent.name == "reports":
            rep.extend(Report.read(p))
    return rep


# -- helpers -------------------------------------------------------------------------------


@lru_cache(maxsize=4)
def _model(preset_name: str):
    return build_model(preset(preset_name))


def _sample_rng(cfg: ExperimentConfig, stage: str, channel: str, i: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _STAGE_CODE[stage], _CHANNEL_CODE[channel], i])


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _dir(cfg: ExperimentConfig, sub: str) -> Path:
    p = cfg.out / sub
    p.mkdir(parents=True, exist_ok=True)
    return p


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}; run the earlier stage first")
    return path


def _templates(cfg: ExperimentConfig, ids):
    tpls = load_templates()
    if ids is not None:
        tpls = [t for t in tpls if t.id in ids]
    return tpls


# -- stages -----------------------------------------------------------------------------------


def stage_generate_corpus(cfg: ExperimentConfig) -> None:
    d = _dir(cfg, "corpus")
    lc = None if cfg.length_class == "any" else cfg.length_class
    if cfg.attack == "pia":
        vocab = health_vocabulary()
        train = build_pia_dataset(cfg.n_train, lc, _templates(cfg, cfg.train_templates), cfg.seed, vocab,
                                  cfg.unstructured)
        test_ids = cfg.test_templates if cfg.test_templates is not None else cfg.train_templates
        test = build_pia_dataset(cfg.n_test, lc, _templates(cfg, test_ids), cfg.seed, vocab, cfg.unstructured,
                                 start=cfg.n_train)
        io.write_vocab(d / "vocab.tsv", vocab)
        io.write_dataset(d / "train.tsv", train)
        io.write_dataset(d / "test.tsv", test)
        return
    texts = [load_domain_text(x) for x in cfg.domains]
    if cfg.test_domains is None:
        pairs, vocab = build_rra_corpus(texts, cfg.seed)
        if cfg.max_pairs is not None:
            pairs = pairs[: cfg.max_pairs]
        cut = int(round(cfg.train_fraction * len(pairs)))
        train, test = pairs[:cut], pairs[cut:]
    else:
        # same shuffle seed for both sides, so a shared domain splits into disjoint halves
        test_texts = [load_domain_text(x) for x in cfg.test_domains]
        vocab = rra_vocabulary(texts + test_texts)
        train, _ = build_rra_corpus(texts, cfg.seed, vocab)
        test, _ = build_rra_corpus(test_texts, cfg.seed, vocab)
        if cfg.max_pairs is not None:
            train, test = train[: cfg.max_pairs], test[: cfg.max_pairs]
        train = train[: int(round(cfg.train_fraction * len(train)))]
        test = test[int(round(cfg.train_fraction * len(test))):]
    io.write_vocab(d / "vocab.tsv", vocab)
    io.write_pairs(d / "train_pairs.tsv", train)
    io.write_pairs(d / "test_pairs.tsv", test)


def _prefill_load(args):
    preset_name, ids = args
    return _model(preset_name).prefill(ids).footprint


def _teacher_forced(args):
    preset_name, p, r = args
    return _model(preset_name).teacher_forced_trace(p, r).footprint


def stage_profile(cfg: ExperimentConfig) -> None:
    c, d = cfg.out / "corpus", _dir(cfg, "profile")
    for part in ("train", "test"):
        if cfg.attack == "pia":
            prompts = io.read_dataset(_need(c / f"{part}.tsv"))
            fps = _pmap(_prefill_load, [(cfg.preset, p.token_ids) for p in prompts], cfg.workers)
        else:
            pairs = io.read_pairs(_need(c / f"{part}_pairs.tsv"))
            fps = _pmap(_teacher_forced, [(cfg.preset, p, r) for p, r in pairs], cfg.workers)
        io.write_footprints(d / f"{part}.fp", fps)


def _simulate_one(args):
    cfg, channel, i, fp_or_ids = args
    rng = _sample_rng(cfg, "simulate", channel, i)
    noise = cfg.noise
    meta = {"sample": i}
    if channel == "l1l2":
        pre = _model(cfg.preset).prefill(fp_or_ids)
        blocks = io.cache_blocks(ch.simulate_cache(pre.schedules, noise, rng), cfg.seed)
        blocks += io.probe_blocks(ch.simulate_pageout_reload(pre.footprint, noise, rng), cfg.seed)
    elif channel == "perf":
        blocks = io.probe_blocks(ch.simulate_perf_counter(fp_or_ids, noise, rng), cfg.seed)
    elif channel == "pageout":
        blocks = io.probe_blocks(ch.simulate_pageout_reload(fp_or_ids, noise, rng), cfg.seed)
    else:
        blocks = io.probe_blocks(ch.simulate_tlb(fp_or_ids, noise, rng), cfg.seed)
    for b in blocks:
        b.meta = {**meta, **b.meta}
    return blocks


def stage_simulate(cfg: ExperimentConfig) -> None:
    d = _dir(cfg, "traces")
    if cfg.attack == "pia":
        prompts = io.read_dataset(_need(cfg.out / "corpus" / "test.tsv"))
    fps = io.read_footprints(_need(cfg.out / "profile" / "test.fp"))
    for channel in cfg.channels:
        if channel == "l1l2":
            items = [(cfg, channel, i, p.token_ids) for i, p in enumerate(prompts)]
        else:
            items = [(cfg, channel, i, fp) for i, fp in enumerate(fps)]
        blocks = [b for bs in _pmap(_simulate_one, items, cfg.workers) for b in bs]
        io.write_mtrc(d / f"{channel}.mtrc", blocks)


def _by_sample(blocks):
    groups: dict[int, list] = {}
    for b in blocks:
        groups.setdefault(int(b.meta["sample"]), []).append(b)
    return [groups[i] for i in sorted(groups)]


def _translate_one(args):
    cfg, channel, blocks, n_tokens = args
    mcfg = cfg.model_config
    budget = None if n_tokens is None else n_tokens * mcfg.top_k
    if channel == "l1l2":
        sweep = io.blocks_to_probe(blocks, "reload").latencies[0]
        est = tr.recover_load_cpu(io.blocks_to_cache(blocks), mcfg, budget, sweep=sweep)
        return est.proportions, None
    if channel == "perf":
        return tr.recover_load_gpu(io.blocks_to_probe(blocks, "threads"), budget).proportions, None
    if channel == "pageout":
        est = tr.recover_seq_pageout(io.blocks_to_probe(blocks, "reload"), mcfg.top_k)
    else:
        est = tr.recover_seq_tlb(io.blocks_to_probe(blocks, "tlb"))
    return ExpertFootprint.from_sequences(est.mask), ExpertFootprint.from_sequences(est.evidence)


def stage_translate(cfg: ExperimentConfig) -> None:
    d = _dir(cfg, "translated")
    lengths = None
    if cfg.attack == "pia":
        lengths = [len(p.token_ids) for p in io.read_dataset(_need(cfg.out / "corpus" / "test.tsv"))]
    for channel in cfg.channels:
        groups = _by_sample(io.read_mtrc(_need(cfg.out / "traces" / f"{channel}.mtrc")))
        items = [(cfg, channel, g, None if lengths is None else lengths[i]) for i, g in enumerate(groups)]
        results = _pmap(_translate_one, items, cfg.workers)
        io.write_footprints(d / f"{channel}.fp", [r[0] for r in results])
        if results and results[0][1] is not None:
            io.write_footprints(d / f"{channel}.evidence.fp", [r[1] for r in results])


def _pia_labels(cfg, part):
    prompts = io.read_dataset(_need(cfg.out / "corpus" / f"{part}.tsv"))
    return np.array([p.record.attribute(cfg.attribute) for p in prompts])


def _sequence_data(fps, pairs):
    x = np.concatenate([featurize_sequence(fp.sequences) for fp in fps])
    y = np.concatenate([r for _, r in pairs])
    return x, y


def stage_train(cfg: ExperimentConfig) -> None:
    d = _dir(cfg, "models")
    fps = io.read_footprints(_need(cfg.out / "profile" / "train.fp"))
    if cfg.attack == "pia":
        x = featurize_load(np.stack([fp.load for fp in fps]))
        ds = ProfilingDataset(x, _pia_labels(cfg, "train"), ATTRIBUTE_CARDINALITY[cfg.attribute], cfg.attribute)
        io.save_model(d / "pia.model", train_pia(ds, cfg.pia))
    else:
        vocab = io.read_vocab(_need(cfg.out / "corpus" / "vocab.tsv"))
        x, y = _sequence_data(fps, io.read_pairs(cfg.out / "corpus" / "train_pairs.tsv"))
        io.save_model(d / "rra.model", train_rra(ProfilingDataset(x, y, vocab.size), cfg.rra))


def _sources(cfg):
    return ("direct",) + tuple(cfg.channels)


def _attack_inputs(cfg, source):
    if source == "direct":
        return io.read_footprints(_need(cfg.out / "profile" / "test.fp"))
    return io.read_footprints(_need(cfg.out / "translated" / f"{source}.fp"))


def stage_attack(cfg: ExperimentConfig) -> None:
    d = _dir(cfg, "attack")
    model = io.load_model(_need(cfg.out / "models" / f"{cfg.attack}.model"))
    for source in _sources(cfg):
        fps = _attack_inputs(cfg, source)
        lines = []
        if cfg.attack == "pia":
            loads = np.stack([fp.load if isinstance(fp, ExpertFootprint) else fp for fp in fps])
            scores = infer_pia(model, featurize_load(loads))
            top = np.argsort(-scores, axis=1, kind="stable")[:, :5]
            lines = [f"{i}\t" + " ".join(map(str, row)) for i, row in enumerate(top)]
        else:
            for i, fp in enumerate(fps):
                ids = np.argmax(infer_rra(model, featurize_sequence(fp.sequences)), axis=1)
                lines.append(f"{i}\t" + " ".join(map(str, ids)))
        (d / f"{source}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_predictions(path):
    out = []
    for line in _need(path).read_text(encoding="utf-8").splitlines():
        if line:
            _, _, ids = line.partition("\t")
            out.append(np.array(ids.split(), dtype=np.int64))
    return out


def stage_evaluate(cfg: ExperimentConfig) -> Report:
    rep = Report()
    truth_fps = io.read_footprints(_need(cfg.out / "profile" / "test.fp"))
    for source in _sources(cfg):
        exp = f"{cfg.name}:{source}"
        preds = _read_predictions(cfg.out / "attack" / f"{source}.tsv")
        if cfg.attack == "pia":
            y = _pia_labels(cfg, "test")
            ranked = np.stack(preds)
            rep.add(exp, f"{cfg.attribute}_top1", np.mean(ranked[:, 0] == y), len(y), cfg.seed)
            rep.add(exp, f"{cfg.attribute}_top5", np.mean((ranked == y[:, None]).any(axis=1)), len(y), cfg.seed)
            if source != "direct":
                est = _attack_inputs(cfg, source)
                corr = np.mean([pearson(e, t.load) for e, t in zip(est, truth_fps)])
                rep.add(exp, "load_corr", corr, len(est), cfg.seed)
        else:
            pairs = io.read_pairs(_need(cfg.out / "corpus" / "test_pairs.tsv"))
            truth = np.concatenate([r for _, r in pairs])
            rep.add(exp, "asr", token_asr(np.concatenate(preds), truth), len(truth), cfg.seed)
            if source != "direct":
                est = _attack_inputs(cfg, source)
                ev = io.read_footprints(_need(cfg.out / "translated" / f"{source}.evidence.fp"))
                acc = sequence_accuracy(np.concatenate([e.sequences for e in est]),
                                        np.concatenate([t.sequences for t in truth_fps]),
                                        np.concatenate([e.sequences for e in ev]))
                rep.add(exp, "seq_accuracy", acc, len(truth), cfg.seed)
    rep.write(_dir(cfg, "reports") / "evaluate.csv")
    return rep


def illness_ttest(model, n: int, illness_a: int, illness_b: int, seed: int, length_class: str | None = "short"):
    """Welch t-test on prefill loads of two illness groups, plus a same-illness control.

    The control splits 2n prompts that all carry ``illness_a`` into two
    random halves. Returns ``(report_ab, report_control)``.
    """
    tpls = load_templates()
    vocab = health_vocabulary(tpls)

    def loads(illness, count, offset):
        recs = [replace(sample_record(_derived_rng(seed, offset + i, 1)), illness=illness) for i in range(count)]
        ds = build_pia_dataset(count, length_class, tpls, seed, vocab, start=offset, records=recs)
        return np.stack([model.prefill(p.token_ids).footprint.load for p in ds])

    a = loads(illness_a, n, 0)
    b = loads(illness_b, n, n)
    ctrl = np.concatenate([a, loads(illness_a, n, 2 * n)])
    perm = np.random.default_rng(seed).permutation(2 * n)
    return welch_t(a, b), welch_t(ctrl[perm[:n]], ctrl[perm[n:]])


def stage_ttest(cfg: ExperimentConfig) -> Report:
    ab, ctrl = illness_ttest(_model(cfg.preset), cfg.ttest_n, cfg.illness_a, cfg.illness_b, cfg.seed)
    d = _dir(cfg, "reports")
    m = cfg.model_config.num_experts
    lines = ["layer,expert,t"] + [f"{i // m},{i % m},{format(t, '.17g')}" for i, t in enumerate(ab.t)]
    (_dir(cfg, "ttest") / "ttest.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    rep = Report()
    exp = f"{cfg.name}:ttest"
    rep.add(exp, f"leaky_count[illness {cfg.illness_a} vs {cfg.illness_b}]", ab.leaky_count, 2 * cfg.ttest_n, cfg.seed)
    rep.add(exp, f"leaky_count[illness {cfg.illness_a} split]", ctrl.leaky_count, 2 * cfg.ttest_n, cfg.seed)
    rep.write(d / "ttest.csv")
    return rep


STAGE_FUNCS = {
    "generate-corpus": stage_generate_corpus,
    "profile": stage_profile,
    "simulate": stage_simulate,
    "translate": stage_translate,
    "train": stage_train,
    "attack": stage_attack,
    "evaluate": stage_evaluate,
    "ttest": stage_ttest,
}


def run_stage(cfg: ExperimentConfig, stage: str):
    try:
        return STAGE_FUNCS[stage](cfg)
    except ConfigError:
        raise
    except Exception as exc:  # tag with the stage; partial artifacts stay on disk
        raise StageError(stage, exc) from exc


def run_pipeline(cfg: ExperimentConfig) -> Report:
    """corpus -> profile -> simulate -> translate -> train -> attack -> evaluate."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    report = Report()
    for stage in STAGES:
        result = run_stage(cfg, stage)
        if isinstance(result, Report):
            report.extend(result)
    return report
