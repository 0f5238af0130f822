"""Batch driver: APK directory in, fused PNG dataset plus JSONL manifest out."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import apk, axml, dex
from .byteplot import DEFAULT_WIDTH_TABLE, WidthTable, bytes_to_gray
from .enhance import EnhanceConfig, adaptive_threshold, canny, equalize_hist
from .errors import (
    ConfigError, ForgeError, InvalidThresholds, MissingLabel, NoInputs, UnwritableOutput,
)
from .fusion import FuseConfig, encode_png, lanczos_resize, merge_rgb, parse_channel_mask

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
LABELS_CSV = "labels.csv"
DEX_MODES = ("concat", "classes-only")


@dataclass(frozen=True)
class PipelineConfig:
    width_table: WidthTable = DEFAULT_WIDTH_TABLE
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    api_whitelist: tuple = dex.PLATFORM_PREFIXES
    include_third_party: bool = False
    dex_mode: str = "concat"
    workers: int = 1
    seed: int = 0
    # classifier settings ride along so train/eval share one config file
    feature_size: int = 32
    learning_rate: float = 0.1
    epochs: int = 200
    l2: float = 1e-4
    batch_size: int = 32
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.dex_mode not in DEX_MODES:
            raise ConfigError(f"dex_mode must be one of {DEX_MODES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie strictly between 0 and 1")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a ``key = value`` file (values are JSON literals or bare strings).

    ``#`` starts a comment. ``FORGE_SEED`` in the environment overrides ``seed``.
    """
    raw: dict = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = _parse_value(value)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "FORGE_SEED" in os.environ:
        try:
            raw["seed"] = int(os.environ["FORGE_SEED"])
        except ValueError:
            raise ConfigError("FORGE_SEED must be an integer") from None
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> PipelineConfig:
    raw = dict(raw)
    enh_keys = ("canny_low", "canny_high", "adaptive_block", "adaptive_c", "adaptive_max")
    try:
        enhance = EnhanceConfig(**{k: int(raw.pop(k)) for k in enh_keys if k in raw})
        fuse = FuseConfig(
            target=int(raw.pop("target", 256)),
            channel_mask=parse_channel_mask(str(raw.pop("channels", "rgb"))),
            rebinarize=bool(raw.pop("rebinarize", False)),
        )
        table = DEFAULT_WIDTH_TABLE
        if "width_table" in raw:
            # [[max_bytes, width], ..., [null, fallback_width]]
            rows = raw.pop("width_table")
            *buckets, (last_limit, fallback) = rows
            if last_limit is not None:
                raise ConfigError("width_table must end with [null, fallback_width]")
            table = WidthTable(tuple((int(a), int(b)) for a, b in buckets), int(fallback))
        if "api_whitelist" in raw:
            raw["api_whitelist"] = tuple(raw["api_whitelist"])
        known = {f for f in PipelineConfig.__dataclass_fields__} - {"width_table", "enhance", "fuse"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return PipelineConfig(width_table=table, enhance=enhance, fuse=fuse, **raw)
    except (TypeError, ValueError, IndexError, InvalidThresholds) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


@dataclass
class Features:
    """The three byte payloads imaged for one APK."""
    sha256: str
    dex: bytes
    manifest: bytes
    api: bytes
    warnings: list[str]


@dataclass
class DatasetRecord:
    apk_path: str
    apk_sha256: str | None
    label: str | None
    output_png: str | None
    status: str
    reason: str | None = None
    warnings: list[str] = field(default_factory=list)
    channel_stats: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        return cls(**json.loads(line))


def _collect(caught) -> list[str]:
    return [str(w.message) for w in caught]


def extract_features(apk_bytes: bytes, cfg: PipelineConfig = PipelineConfig()) -> Features:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        art = apk.extract_artifacts(apk_bytes)
        blobs = art.dex_blobs
        if cfg.dex_mode == "classes-only":
            blobs = [b for b in blobs if b[0] == "classes.dex"] or blobs[:1]
        api = dex.api_text(blobs, cfg.api_whitelist, cfg.include_third_party)
        manifest = axml.manifest_text(art.manifest_axml)
    notes = art.extraction_warnings + _collect(caught)
    dex_bytes = art.dex_payload(classes_only=cfg.dex_mode == "classes-only")
    return Features(art.apk_sha256, dex_bytes, manifest, api, notes)


def enhanced_planes(feat: Features, cfg: PipelineConfig = PipelineConfig()) -> tuple[dict, list[str]]:
    """Byteplot, enhance and resize each feature; returns planes keyed by feature."""
    t = cfg.fuse.target
    planes = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        kernels = {
            "dex": lambda g: canny(g, cfg.enhance.canny_low, cfg.enhance.canny_high),
            "manifest": equalize_hist,
            "api": lambda g: adaptive_threshold(g, cfg.enhance),
        }
        for name, payload in (("dex", feat.dex), ("manifest", feat.manifest), ("api", feat.api)):
            if not payload:
                warnings.warn(f"{name}: empty payload, channel left black")
                planes[name] = np.zeros((t, t), dtype=np.uint8)
                continue
            enhanced = kernels[name](bytes_to_gray(payload, cfg.width_table))
            resized = lanczos_resize(enhanced, t, t)
            if cfg.fuse.rebinarize:
                resized = np.where(resized >= 128, 255, 0).astype(np.uint8)
            planes[name] = resized
    return planes, _collect(caught)


def fuse_apk(apk_bytes: bytes, cfg: PipelineConfig = PipelineConfig()):
    """Full single-APK pipeline; returns ``(rgb, features, notes)``."""
    feat = extract_features(apk_bytes, cfg)
    planes, notes = enhanced_planes(feat, cfg)
    rgb = merge_rgb(planes["dex"], planes["manifest"], planes["api"], cfg.fuse)
    return rgb, feat, feat.warnings + notes


def channel_stats(rgb: np.ndarray) -> dict:
    stats = {}
    for k, ch in enumerate("rgb"):
        plane = rgb[..., k]
        stats[ch] = {"min": int(plane.min()), "max": int(plane.max()),
                     "mean": round(float(plane.mean()), 6)}
    return stats


def discover(input_dir: Path) -> list[tuple[Path, str | None]]:
    """APK paths under ``input_dir`` (sorted) with their labels, if resolvable."""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise NoInputs(f"{input_dir} is not a directory")
    csv_labels: dict[str, str] = {}
    csv_path = input_dir / LABELS_CSV
    if csv_path.exists():
        with csv_path.open(newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if len(row) >= 2 and row[0] != "filename":
                    csv_labels[row[0].strip()] = row[1].strip()
    found = []
    for path in sorted(p for p in input_dir.rglob("*.apk") if p.is_file()):
        rel = path.relative_to(input_dir)
        label = csv_labels.get(rel.as_posix()) or csv_labels.get(path.name)
        if label is None and len(rel.parts) > 1:
            label = rel.parts[0]
        found.append((path, label))
    if not found:
        raise NoInputs(f"no .apk files under {input_dir}")
    return found


def _safe_label(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


def process_one(job) -> DatasetRecord:
    """Worker entry point; never raises for per-APK problems."""
    path, rel, label, output_dir, cfg = job
    record = DatasetRecord(apk_path=rel, apk_sha256=None, label=label, output_png=None, status="Failed")
    try:
        if label is None:
            raise MissingLabel("no label from directory layout or labels.csv")
        data = Path(path).read_bytes()
        rgb, feat, notes = fuse_apk(data, cfg)
        name = f"{feat.sha256}_{_safe_label(label)}.png"
        Path(output_dir, name).write_bytes(encode_png(rgb))
        record.apk_sha256 = feat.sha256
        record.output_png = name
        record.status = "Ok"
        record.warnings = notes
        record.channel_stats = channel_stats(rgb)
    except ForgeError as exc:
        record.reason = exc.reason
        record.warnings = [str(exc)]
    except OSError as exc:
        record.reason = "IOError"
        record.warnings = [str(exc)]
    except Exception as exc:  # keep one pathological APK from killing the batch
        log.exception("internal error on %s", rel)
        record.reason = "InternalError"
        record.warnings = [f"{type(exc).__name__}: {exc}"]
    return record


def run_pipeline(input_dir, output_dir, cfg: PipelineConfig = PipelineConfig()) -> list[DatasetRecord]:
    """Process every APK and write PNGs plus ``manifest.jsonl`` to ``output_dir``."""
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    found = discover(input_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        probe = output_dir / ".forge-write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UnwritableOutput(f"{output_dir}: {exc}") from None

    jobs = [(str(p), p.relative_to(input_dir).as_posix(), label, str(output_dir), cfg)
            for p, label in found]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(process_one, jobs, chunksize=1))
    else:
        records = [process_one(j) for j in jobs]
    records.sort(key=lambda r: r.apk_path)
    write_manifest(output_dir / MANIFEST_NAME, records)
    ok = sum(r.status == "Ok" for r in records)
    log.info("%d/%d APKs imaged into %s", ok, len(records), output_dir)
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord.from_json(line) for line in fh if line.strip()]


def split_records(records, test_fraction: float, seed: int):
    """Deterministic train/test split of the Ok records (sorted by path first)."""
    ok = sorted((r for r in records if r.status == "Ok"), key=lambda r: r.apk_path)
    order = np.random.default_rng(seed).permutation(len(ok))
    n_test = int(round(len(ok) * test_fraction))
    test_idx = set(order[:n_test].tolist())
    train = [r for i, r in enumerate(ok) if i not in test_idx]
    test = [r for i, r in enumerate(ok) if i in test_idx]
    return train, test


REPORT_HEADER = ("model", "accuracy", "precision", "recall", "f1")


def make_report(rows) -> tuple[str, str]:
    """Render ``(name, metrics)`` pairs as a text table and a CSV document.

    ``metrics`` may be a :class:`~apkforge.classifier.Metrics` or any mapping
    with accuracy/precision/recall/f1 keys.
    """
    table = []
    for name, m in rows:
        vals = [m[k] if isinstance(m, dict) else getattr(m, k) for k in REPORT_HEADER[1:]]
        table.append((name, vals))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for name, vals in table:
        writer.writerow([name] + [f"{v:.4f}" for v in vals])

    width = max([len("model")] + [len(n) for n, _ in table])
    lines = [f"{'model':<{width}}  " + "  ".join(f"{h:>9}" for h in REPORT_HEADER[1:])]
    lines.append("-" * len(lines[0]))
    for name, vals in table:
        lines.append(f"{name:<{width}}  " + "  ".join(f"{100 * v:>8.2f}%" for v in vals))
    return "\n".join(lines) + "\n", buf.getvalue()


def with_overrides(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
