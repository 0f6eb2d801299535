"""End-to-end orchestration: configuration, the nine stages and reporting.

Each stage reads its inputs from the output directory and writes its own
artifacts there, so any stage can be re-run on its own once its
predecessors have produced their files.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cost, data, device, distill, nn, quant, split, stage
from .formats import load_model, save_model

log = logging.getLogger(__name__)

STAGES = ("teach-ssl", "distill", "split", "joint-train", "quantize", "device-train", "calibrate", "infer", "report")


class PipelineError(RuntimeError):
    def __init__(self, stage_name: str, artifact, cause: BaseException | str):
        super().__init__(f"[{stage_name}] {cause} (artifact: {artifact})")
        self.stage = stage_name
        self.artifact = artifact


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class DataSection:
    # "synthetic", "idx:IMAGES[;LABELS]" or "csv:PATH"
    cloud: str = "synthetic"
    local: str = "synthetic"
    cloud_samples: int = 2400
    local_samples: int = 4000
    image_size: int = 16
    noise_min: float = 0.02
    noise_max: float = 0.35


@dataclass
class TeacherSection:
    arch: str = "conv:16:3 relu conv:32:3:2 relu conv:32:3 relu conv:64:3 relu gap"
    proj_dim: int = 64
    init: str = "he"


@dataclass
class StudentSection:
    arch: str = "conv:8:3 relu conv:16:3:2 relu conv:16:3 relu conv:32:3 relu gap"
    init: str = "he"


@dataclass
class SslSection:
    tau_guide: float = 0.04
    tau_explore: float = 0.1
    ema_momentum: float = 0.99
    center_momentum: float = 0.9
    epochs: int = 4
    lr: float = 0.05
    batch_size: int = 64
    crop_min: float = 0.6
    crop_max: float = 1.0
    flip_prob: float = 0.5
    noise_sigma: float = 0.05


@dataclass
class DistillSection:
    alpha: float = 1.0
    epochs: int = 15
    lr: float = 0.05
    batch_size: int = 64


@dataclass
class JointSection:
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 5
    lr: float = 0.02
    batch_size: int = 64


@dataclass
class SplitSection:
    range_lo: float = 0.25
    range_hi: float = 0.85
    probe_epochs: int = 30
    # only consider cuts right after a ReLU (module boundaries)
    after_relu_only: bool = True


@dataclass
class QuantSection:
    enabled: bool = True
    calibration_samples: int = 256


@dataclass
class DeviceSection:
    lr: float = 0.1
    epochs: int = 40
    sram_kb: float = 640.0
    flash_kb: float = 2048.0
    shuffle: bool = False


@dataclass
class StageSection:
    calibration_samples: int = 5
    # "auto" derives factors for sweep_ratios from label-free validation confidences
    adjust_factors: str = "auto"
    sweep_ratios: str = "0.25,0.5,0.75"
    adjust_factor: float = 1.0


@dataclass
class CostSection:
    joules_per_mac: float = 1.0


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentSection = field(default_factory=StudentSection)
    ssl: SslSection = field(default_factory=SslSection)
    distill: DistillSection = field(default_factory=DistillSection)
    joint: JointSection = field(default_factory=JointSection)
    split: SplitSection = field(default_factory=SplitSection)
    quant: QuantSection = field(default_factory=QuantSection)
    device: DeviceSection = field(default_factory=DeviceSection)
    stage: StageSection = field(default_factory=StageSection)
    cost: CostSection = field(default_factory=CostSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in fields(self):
            section = getattr(self, sec.name)
            cp[sec.name] = {f.name: _fmt(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, base_dir: str | Path | None = None, check_paths: bool = True) -> "PipelineConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        unknown = set(cp.sections()) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        if "run" not in cp or "seed" not in cp["run"]:
            raise ValueError("config must set [run] seed")
        kwargs = {}
        for sec in fields(cls):
            section_cls = type(sec.default_factory())
            values = {}
            if sec.name in cp:
                known = {f.name: f for f in fields(section_cls)}
                for key, raw in cp[sec.name].items():
                    if key not in known:
                        raise ValueError(f"unknown key [{sec.name}] {key}")
                    values[key] = _parse(raw, type(getattr(section_cls(), key)))
            kwargs[sec.name] = section_cls(**values)
        cfg = cls(**kwargs)
        if check_paths:
            cfg.check_paths(base_dir)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_ini(path.read_text(encoding="utf-8"), base_dir=path.parent)

    def check_paths(self, base_dir=None) -> None:
        for source in (self.data.cloud, self.data.local):
            for p in _source_paths(source, base_dir):
                if not p.exists():
                    raise FileNotFoundError(f"dataset path does not exist: {p}")

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, run=RunSection(seed))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ):
    if typ is bool:
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    return typ(raw.strip())


def _source_paths(source: str, base_dir=None) -> list[Path]:
    if source == "synthetic":
        return []
    kind, _, rest = source.partition(":")
    if kind not in ("idx", "csv") or not rest:
        raise ValueError(f"bad dataset source {source!r}")
    base = Path(base_dir) if base_dir is not None else Path(".")
    return [p if p.is_absolute() else base / p for p in (Path(s) for s in rest.split(";"))]


# --------------------------------------------------------------------------
# data


@dataclass
class Datasets:
    cloud: data.DatasetHandle
    local: data.DatasetHandle


def load_source(source: str, which: str, cfg: PipelineConfig, base_dir=None) -> data.DatasetHandle:
    d = cfg.data
    size = d.image_size
    if source == "synthetic":
        classes = data.CLOUD_CLASSES if which == "cloud" else data.LOCAL_CLASSES
        n = d.cloud_samples if which == "cloud" else d.local_samples
        offset = 1 if which == "cloud" else 2
        x, y = data.synthetic_images(classes, n, cfg.seed + offset, size, (d.noise_min, d.noise_max))
        pre = {"source": f"synthetic-{which}", "classes": ",".join(classes), "normalize": "none (already in [0,1])"}
        return data.from_arrays(x, y, cfg.seed, preprocessing=pre)
    paths = _source_paths(source, base_dir)
    kind = source.split(":", 1)[0]
    if kind == "idx":
        labels = paths[1] if len(paths) > 1 else None
        return data.ingest(paths[0], "idx", cfg.seed, labels_path=labels, resize_to=(size, size))
    return data.ingest(paths[0], "csv", cfg.seed)


def load_datasets(cfg: PipelineConfig, base_dir=None) -> Datasets:
    return Datasets(load_source(cfg.data.cloud, "cloud", cfg, base_dir),
                    load_source(cfg.data.local, "local", cfg, base_dir))


# --------------------------------------------------------------------------
# helpers


def _write_csv(path: Path, header, rows, comments=()) -> None:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def _need(path: Path, stage_name: str) -> Path:
    if not path.exists():
        raise PipelineError(stage_name, path, "missing input artifact; run the preceding stage first")
    return path


def read_optimal_index(path: Path) -> int:
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("# optimal_index="):
            return int(line.split("=", 1)[1])
    raise ValueError(f"{path}: no optimal_index footer")


def _fmtf(v) -> str:
    return "" if v is None else repr(float(v))


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out: str | Path, base_dir=None):
        self.cfg = cfg
        self.out = Path(out)
        self.base_dir = base_dir
        self._data: Datasets | None = None

    # ---- shared state --------------------------------------------------

    @property
    def data(self) -> Datasets:
        if self._data is None:
            self._data = load_datasets(self.cfg, self.base_dir)
        return self._data

    def path(self, name: str) -> Path:
        return self.out / name

    def extractors(self, name: str = "") -> tuple:
        """Part and remainder extractors as deployed (quantized when enabled)."""
        if self.cfg.quant.enabled:
            return (quant.QuantNet.load(_need(self.path("part.mcrq"), name)),
                    quant.QuantNet.load(_need(self.path("remainder.mcrq"), name)))
        return (load_model(_need(self.path("part.mcrt"), name)),
                load_model(_need(self.path("remainder.mcrt"), name)))

    def staged_model(self, name: str = "") -> stage.StagedModel:
        part, rem = self.extractors(name)
        pc = device.DeviceClassifier.load(_need(self.path("part_clf.mclf"), name), "part_clf")
        fc = device.DeviceClassifier.load(_need(self.path("full_clf.mclf"), name), "full_clf")
        return stage.StagedModel(part, rem, pc, fc)

    def calibration(self, name: str = "") -> stage.CalibrationResult:
        path = _need(self.path("calibration.csv"), name)
        rows = [r for r in csv.reader(l for l in path.read_text(encoding="utf-8").splitlines()
                                      if not l.startswith("#"))][1:]
        confs = [float(r[1]) for r in rows]
        return stage.calibrate_confidences(confs, self.cfg.stage.adjust_factor)

    # ---- stages --------------------------------------------------------

    def teach_ssl(self) -> None:
        cfg = self.cfg
        x, _ = self.data.cloud.subset("train")
        init = nn.seeded_init(x.shape[1:], cfg.teacher.arch, cfg.seed, head_classes=cfg.teacher.proj_dim,
                              init=cfg.teacher.init)
        s = cfg.ssl
        ssl_cfg = distill.SslConfig(s.tau_guide, s.tau_explore, s.ema_momentum, s.center_momentum,
                                    data.Augmentation((s.crop_min, s.crop_max), s.flip_prob, s.noise_sigma),
                                    s.epochs, s.lr, s.batch_size)
        save_model(distill.train_teacher(init, x, ssl_cfg, cfg.seed), self.path("teacher.mcrt"))

    def distill(self) -> None:
        cfg = self.cfg
        teacher = load_model(_need(self.path("teacher.mcrt"), "distill"))
        x, y = self.data.cloud.subset("train")
        emb = distill.extract_embeddings(teacher, x, y, ids=self.data.cloud.train)
        emb.save(self.path("embeddings.memb"))
        student = nn.seeded_init(x.shape[1:], cfg.student.arch, cfg.seed + 1, init=cfg.student.init)
        d = cfg.distill
        dcfg = distill.DistillConfig(alpha=d.alpha, epochs=d.epochs, lr=d.lr, batch_size=d.batch_size)
        student = distill.run_distillation(student, emb, x, dcfg, cfg.seed, classes=self.data.cloud.classes)
        save_model(student, self.path("student.mcrt"))

    def split(self) -> None:
        cfg = self.cfg
        student = load_model(_need(self.path("student.mcrt"), "split"))
        cloud = self.data.cloud
        probe = split.ProbeData(*cloud.subset("train"), *cloud.subset("test"))
        lo, hi = split.default_range(len(student), cfg.split.range_lo, cfg.split.range_hi)
        cands = None
        if cfg.split.after_relu_only:
            cands = [i for i in range(lo, hi + 1) if student.blocks[i - 1].kind == "relu"]
        report = split.find_optimal_split(student, probe, (lo, hi), cands, cfg.split.probe_epochs, cfg.seed)
        if cands is not None:
            report.notes.append("candidates restricted to cuts directly after a ReLU block")
        self.path("split_report.csv").write_text(report.to_csv(), encoding="utf-8", newline="")

    def joint_train(self) -> None:
        cfg = self.cfg
        student = load_model(_need(self.path("student.mcrt"), "joint-train"))
        emb = distill.EmbeddingDataset.load(_need(self.path("embeddings.memb"), "joint-train"))
        k = read_optimal_index(_need(self.path("split_report.csv"), "joint-train"))
        x, _ = self.data.cloud.subset("train")
        j = cfg.joint
        jcfg = distill.DistillConfig(alpha=j.alpha, beta=j.beta, epochs=j.epochs, lr=j.lr, batch_size=j.batch_size)
        joint = distill.joint_train(student, k, emb, x, jcfg, cfg.seed, classes=self.data.cloud.classes)
        part, rem = split.split_model(joint, k)
        save_model(joint, self.path("joint.mcrt"))
        save_model(part, self.path("part.mcrt"))
        save_model(rem, self.path("remainder.mcrt"))

    def quantize(self) -> None:
        part = load_model(_need(self.path("part.mcrt"), "quantize"))
        rem = load_model(_need(self.path("remainder.mcrt"), "quantize"))
        x, _ = self.data.cloud.subset("train")
        calib = x[: self.cfg.quant.calibration_samples]
        qpart = quant.quantize(part, calib)
        qrem = quant.quantize(rem, device.run_extractor(part, calib))
        qpart.save(self.path("part.mcrq"))
        qrem.save(self.path("remainder.mcrq"))

    def device_train(self) -> None:
        cfg = self.cfg
        part, rem = self.extractors("device-train")
        x, y = self.data.local.subset("train")
        classes = self.data.local.classes
        budget = device.MemoryBudget(int(cfg.device.sram_kb * 1024), int(cfg.device.flash_kb * 1024))
        budget.alloc("sram", "extractor", _extractor_sram(part, rem))
        p_dim = nn.readout(device.run_extractor(part, x[:1])).shape[1]
        f_dim = nn.readout(device.run_extractor(rem, device.run_extractor(part, x[:1]))).shape[1]
        pc = device.build_classifier(p_dim, classes, cfg.device.lr, cfg.seed + 10, budget, "part_clf")
        fc = device.build_classifier(f_dim, classes, cfg.device.lr, cfg.seed + 11, budget, "full_clf")
        none = device.build_classifier(f_dim, classes, cfg.device.lr, cfg.seed + 12, None, "none_clf")
        none.save(self.path("none_clf.mclf"))

        # first epoch streams raw samples through the extractor (stage-training)
        # and keeps only the features; later epochs replay them from flash
        part_store = device.EmbeddingStore(self.path("part_features.mfea"), p_dim, budget)
        full_store = device.EmbeddingStore(self.path("full_features.mfea"), f_dim, budget)
        trainer = device.StageTrainer(part, rem, pc, fc)
        lp = lf = 0.0
        for i in range(len(x)):
            fp, ff, a, b = trainer.step(x[i], int(y[i]), token=i)
            lp += a
            lf += b
            part_store.append(device.EmbeddingRecord(int(y[i]), fp))
            full_store.append(device.EmbeddingRecord(int(y[i]), ff))
        rows = [[1, "stage", repr(lp / len(x)), repr(lf / len(x))]]
        seed = cfg.seed if cfg.device.shuffle else None
        # extractor SRAM is released by train_from_store
        hp = device.train_from_store(pc, part_store.path, cfg.device.epochs - 1, budget, seed)
        hf = device.train_from_store(fc, full_store.path, cfg.device.epochs - 1, budget, seed)
        rows += [[e + 2, "stored", repr(a), repr(b)] for e, (a, b) in enumerate(zip(hp, hf))]
        pc.save(self.path("part_clf.mclf"))
        fc.save(self.path("full_clf.mclf"))
        _write_csv(self.path("device_train.csv"), ["epoch", "source", "part_loss", "full_loss"], rows,
                   [f"samples={len(x)}", f"part_extractor_calls={trainer.part_ext.calls}",
                    f"sram_peak={budget.peak['sram']}", f"flash_peak={budget.peak['flash']}",
                    f"stage_training_macs={trainer.macs_executed}"])

    def calibrate(self) -> None:
        cfg = self.cfg
        model = self.staged_model("calibrate")
        # fresh, unlabeled samples: the heads never saw the validation split
        x, _ = self.data.local.subset("val")
        idx = np.random.default_rng(cfg.seed + 20).choice(len(x), size=cfg.stage.calibration_samples, replace=False)
        calib = stage.calibrate(model, x[idx], cfg.stage.adjust_factor)
        rows = [[int(i), repr(float(c))] for i, c in zip(range(calib.n_samples), calib.confidences)]
        _write_csv(self.path("calibration.csv"), ["rank", "confidence"], rows,
                   [f"confidence_metric={stage.CONFIDENCE_METRIC}", f"n_samples={calib.n_samples}",
                    f"median={calib.median!r}", f"adjust_factor={calib.adjust_factor!r}",
                    f"threshold={calib.threshold!r}"])

    def _factors(self, model, calib) -> list[float]:
        s = self.cfg.stage
        if s.adjust_factors.strip().lower() == "auto":
            xv, _ = self.data.local.subset("val")
            pop = stage.calibrate_confidences(model.part_confidences(xv))
            ratios = [float(r) for r in s.sweep_ratios.split(",")]
            return [float(np.quantile(pop.confidences, 1.0 - r)) / calib.median for r in ratios]
        return [float(f) for f in s.adjust_factors.split(",")]

    def infer(self) -> None:
        model = self.staged_model("infer")
        calib = self.calibration("infer")
        xt, yt = self.data.local.subset("test")
        out = stage.route(calib, model, xt, yt, ids=self.data.local.test)
        self.path("routing_log.csv").write_text(out.to_csv(), encoding="utf-8", newline="")
        rows = stage.sweep_ratio(calib, model, xt, self._factors(model, calib), yt)
        self.path("ratio_sweep.csv").write_text(stage.sweep_to_csv(rows), encoding="utf-8", newline="")

    def report(self) -> None:
        cfg = self.cfg
        model = self.staged_model("report")
        calib = self.calibration("report")
        xt, yt = self.data.local.subset("test")
        none = device.DeviceClassifier.load(_need(self.path("none_clf.mclf"), "report"))
        full_feats = nn.readout(device.run_extractor(model.remainder, device.run_extractor(model.part, xt)))
        jpm = cfg.cost.joules_per_mac
        routed = stage.route(calib, model, xt, yt)
        sweep = stage.sweep_ratio(calib, model, xt, self._factors(model, calib), yt)

        base = model.mac_full_only
        rows = [
            ["none", repr(none.accuracy(full_feats, yt)), "", repr(float(base)), _fmtf(0.0)],
            ["head-only", repr(model.full_clf.accuracy(full_feats, yt)), "", repr(float(base)), _fmtf(0.0)],
            ["part-only", repr(float((model.part_predict(xt) == yt).mean())), repr(1.0),
             repr(float(model.mac_exit)), _fmtf(cost.savings(base, model.mac_exit))],
        ]
        reports = []
        for label, out_ratio, acc in [("stage-decision", routed.ratio, routed.accuracy)] + [
                (f"stage-decision@{r.factor:.4f}", r.ratio, r.accuracy) for r in sweep]:
            rep = cost.cost_report(label, model.mac_exit, model.mac_continue, out_ratio, base, jpm)
            reports.append(rep)
            rows.append([label, repr(acc), repr(out_ratio), repr(rep.expected_macs), repr(rep.savings_percent)])
        _write_csv(self.path("summary.csv"), ["method", "accuracy", "ratio", "expected_macs", "savings_percent"],
                   rows, [cost.PROXY_NOTE, f"confidence_metric={stage.CONFIDENCE_METRIC}",
                          "none = randomly initialised untrained head on full-model features"])
        self.path("cost_report.csv").write_text(cost.reports_to_csv(reports), encoding="utf-8", newline="")
        lines = [f"desk run (seed {cfg.seed})", ""]
        lines += [f"  {r[0]:<28} acc={float(r[1]):.4f}" + (f"  ratio={float(r[2]):.3f}" if r[2] else "")
                  + (f"  savings={float(r[4]):.2f}%" if r[4] else "") for r in rows]
        lines += ["", f"  MACs: part path {model.mac_exit}, continued path {model.mac_continue}, "
                      f"full-only {base}", f"  threshold {calib.threshold:.4f} from {calib.n_samples} samples"]
        self.path("summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")

    # ---- driver --------------------------------------------------------

    def run_stage(self, name: str) -> None:
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; expected one of {STAGES}")
        if name == "quantize" and not self.cfg.quant.enabled:
            log.info("quantize: disabled in config, skipping")
            return
        self.out.mkdir(parents=True, exist_ok=True)
        t = time.perf_counter()
        try:
            getattr(self, name.replace("-", "_"))()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, self.out, exc) from exc
        log.info("%s done in %.1fs", name, time.perf_counter() - t)

    def run(self, stages=STAGES) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.path("config.ini").write_text(self.cfg.to_ini(), encoding="utf-8", newline="")
        for name in stages:
            self.run_stage(name)


def _extractor_sram(part, rem) -> int:
    """Rough SRAM charge for the deployed extractor: largest activation pair."""
    def acts(ext):
        net = ext.to_float() if isinstance(ext, quant.QuantNet) else ext
        shapes = [net.shape_at(i) for i in range(len(net.blocks) + 1)]
        return [int(np.prod(s)) for s in shapes]

    sizes = acts(part) + acts(rem)[1:]
    width = 1 if isinstance(part, quant.QuantNet) else 4
    return width * max(a + b for a, b in zip(sizes, sizes[1:])) if len(sizes) > 1 else width * sizes[0]


def run_pipeline(cfg: PipelineConfig, out: str | Path, stages=STAGES, base_dir=None) -> Pipeline:
    pipe = Pipeline(cfg, out, base_dir)
    pipe.run(stages)
    return pipe
