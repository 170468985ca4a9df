"""Command-line pipeline: ingest, diffuse, probe, retrieve, interpolate, report.

Each stage owns a subdirectory of the run's --out directory, writes a manifest
(config hash, seed, versions, output checksums), and never overwrites a
previous complete stage on failure: work happens in `<stage>.partial`, which
is swapped in only on success.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__, data, decode, diffusion, forest, nn, rfae, synth, transport

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4


class ConfigError(Exception):
    pass


class MissingArtifactError(Exception):
    pass


# Defaults mirror the reference hyperparameter table names (blur, scaling,
# residual_scale, n_components, ...). The manifold hidden sizes [8192, 12288]
# of the full-scale preset are replaced by input-scaled defaults at desk scale.
DEFAULTS: dict = {
    "data": {"sequences": "", "embeddings": []},
    "synthetic": {
        "suite": "",  # "", "layers", "retrieval", "gradient"
        "n": 240,
        "n_layers": 3,
        "D": 32,
        "length": 36,
        "emb_noise": 0.02,
    },
    "split": {"ratios": [0.7, 0.15, 0.15]},
    "forest": {"n_trees": 100, "max_depth": 0, "min_leaf": 1, "mtry": 0, "task": "classification"},
    "kernel": {"mode": "affinity", "k": 5, "alpha": 40.0, "t": 0, "t_max": 16, "default_t": 4},
    "rfae": {
        "n_components": 2,
        "lambda": 0.5,
        "hidden": [64],
        "epochs": 300,
        "batch_size": 32,
        "lr_start": 3e-5,
        "lr_max": 5e-4,
        "weight_decay": 1e-5,
        "patience": 20,
        "val_fraction": 0.15,
    },
    "ode": {
        "t_start": 0.0,
        "t_end": 4.0,
        "n_timepoints": 200,
        "solver": "rk4",
        "loss": "sinkhorn",
        "p": 2,
        "blur": 0.002,
        "scaling": 0.9,
        "num_epochs": 500,
        "batch_size": 64,
        "lr": 1e-4,
        "hidden": [64, 64],
        "sinkhorn_tol": 1e-4,
        "sinkhorn_max_iter": 20000,
        "train_timepoints": 0,  # 0: use n_timepoints while training too
    },
    "manifold": {
        "residual_scale": 0.3,
        "hidden": [],  # [] selects (4*d_in, 6*d_in)
        "epochs": 300,
        "batch_size": 32,
        "lr_start": 3e-5,
        "lr_max": 5e-4,
        "weight_decay": 1e-5,
        "patience": 20,
    },
    "probe": {
        "methods": ["none", "ae", "fdd"],
        "hidden": [16],
        "epochs": 300,
        "batch_size": 32,
        "lr_start": 3e-5,
        "lr_max": 5e-4,
        "weight_decay": 1e-5,
        "patience": 20,
        "ae_epochs": 250,
        "ae_hidden": [64],
    },
    "retrieve": {"k": 5, "n_retrieve": 0, "layer": -1},  # layer -1: first available
    "interpolate": {"layer": -1, "source_index": 0},
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULTS))
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    return _merge(DEFAULTS, raw)


def config_hash(config: dict, seed: int) -> str:
    canon = json.dumps({"config": config, "seed": seed}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def fdd_threads() -> int:
    raw = os.environ.get("FDD_THREADS", "")
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"FDD_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"FDD_THREADS must be >= 1, got {value}")
    return value


# ---------------------------------------------------------------------------
# Stage plumbing
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(stage_dir: Path, stage: str, config: dict, seed: int) -> None:
    outputs = {
        p.name: _sha256(p)
        for p in sorted(stage_dir.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "stage": stage,
        "config_hash": config_hash(config, seed),
        "seed": seed,
        "fdd_version": __version__,
        "numpy_version": np.__version__,
        "fdd_threads": fdd_threads(),
        "outputs": outputs,
    }
    with open(stage_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def run_stage(out: Path, stage: str, config: dict, seed: int, fn) -> Path:
    """Run `fn(tmp_dir)` and swap the result into out/<stage> on success.

    On failure the partial directory is left in place for inspection and any
    previous complete stage directory is untouched.
    """
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / f"{stage}.partial"
    final = out / stage
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        fn(tmp)
        write_manifest(tmp, stage, config, seed)
    except BaseException:
        print(f"stage {stage!r} failed; partial artifacts kept at {tmp}", file=sys.stderr)
        raise
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)
    return final


def require_stage(out: Path, stage: str) -> Path:
    path = out / stage
    if not (path / "manifest.json").exists():
        raise MissingArtifactError(f"stage {stage!r} has no complete artifacts under {out}")
    return path


# ---------------------------------------------------------------------------
# Small artifact helpers
# ---------------------------------------------------------------------------


def _write_matrix_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_svg_lines(path: Path, x, series: dict[str, np.ndarray], title: str,
                    width: int = 640, height: int = 360) -> None:
    """Minimal standalone SVG line chart (no plotting dependency)."""
    margin = 50
    x = np.asarray(x, dtype=float)
    all_y = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    x0, x1 = float(x.min()), float(x.max())
    y0, y1 = float(all_y.min()), float(all_y.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    sx = lambda v: margin + (v - x0) / (x1 - x0) * (width - 2 * margin)
    sy = lambda v: height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 16}" font-size="10">{x0:.3g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" text-anchor="end" font-size="10">{x1:.3g}</text>',
        f'<text x="{margin - 4}" y="{height - margin}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{margin - 4}" y="{margin + 4}" text-anchor="end" font-size="10">{y1:.3g}</text>',
    ]
    for i, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{sx(xi):.2f},{sy(yi):.2f}" for xi, yi in zip(x, np.asarray(ys, dtype=float)))
        color = colors[i % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width - margin}" y="{margin + 14 * i}" text-anchor="end" '
            f'font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts))


def _forest_config(cfg: dict, seed: int) -> forest.ForestConfig:
    f = cfg["forest"]
    return forest.ForestConfig(
        n_trees=f["n_trees"],
        max_depth=f["max_depth"] or None,
        min_leaf=f["min_leaf"],
        mtry=f["mtry"] or None,
        task=f["task"],
        seed=seed,
    )


def _rfae_config(cfg: dict, seed: int) -> rfae.RfaeConfig:
    r = cfg["rfae"]
    return rfae.RfaeConfig(
        latent_dim=r["n_components"],
        hidden=tuple(r["hidden"]),
        epochs=r["epochs"],
        batch_size=r["batch_size"],
        lr_start=r["lr_start"],
        lr_max=r["lr_max"],
        weight_decay=r["weight_decay"],
        patience=r["patience"],
        val_fraction=r["val_fraction"],
        seed=seed,
    )


def _probe_config(cfg: dict, seed: int) -> decode.ProbeConfig:
    p = cfg["probe"]
    return decode.ProbeConfig(
        hidden=tuple(p["hidden"]),
        epochs=p["epochs"],
        batch_size=p["batch_size"],
        lr_start=p["lr_start"],
        lr_max=p["lr_max"],
        weight_decay=p["weight_decay"],
        patience=p["patience"],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


def _synthesize(cfg: dict, seed: int, stage: Path) -> None:
    s = cfg["synthetic"]
    suite = s["suite"]
    rng = np.random.default_rng(seed + 977)
    if suite == "layers":
        y, layers = synth.layered_suite(n=s["n"], n_layers=s["n_layers"], D=s["D"], seed=seed)
        records = [
            data.SequenceRecord(
                f"p{i:04d}",
                "".join(rng.choice(list(data.CANONICAL_RESIDUES), size=12)),
                label=int(y[i]),
            )
            for i in range(s["n"])
        ]
        for l, E in enumerate(layers):
            data.save_embeddings(data.EmbeddingMatrix(l, E.astype(np.float32)), stage / f"L{l}.fdde")
    elif suite == "retrieval":
        E, raw, y = synth.retrieval_suite(n=s["n"], D=s["D"], seed=seed)
        records = [
            data.SequenceRecord(
                f"p{i:04d}",
                "".join(rng.choice(list(data.CANONICAL_RESIDUES), size=12)),
                label=int(y[i]),
            )
            for i in range(s["n"])
        ]
        data.save_embeddings(data.EmbeddingMatrix(0, E.astype(np.float32)), stage / "L0.fdde")
        data.save_embeddings(data.EmbeddingMatrix(-1, raw.astype(np.float32)), stage / "raw_features.fdde")
    elif suite == "gradient":
        records, s_vals = synth.make_peptide_gradient(n=s["n"], length=s["length"], seed=seed)
        records = [
            data.SequenceRecord(r.id, r.sequence, r.label, float(s_vals[i]))
            for i, r in enumerate(records)
        ]
        E = synth.gradient_embeddings(s_vals, D=s["D"], noise=s["emb_noise"], seed=seed)
        data.save_embeddings(data.EmbeddingMatrix(0, E.astype(np.float32)), stage / "L0.fdde")
    else:
        raise ConfigError(f"unknown synthetic suite {suite!r}")
    data.save_sequences(records, stage / "sequences.csv")


def cmd_ingest(cfg: dict, seed: int, out: Path) -> None:
    def build(stage: Path):
        if cfg["synthetic"]["suite"]:
            _synthesize(cfg, seed, stage)
        else:
            src = cfg["data"]["sequences"]
            if not src:
                raise ConfigError("data.sequences is required unless a synthetic suite is configured")
            if not Path(src).exists():
                raise MissingArtifactError(f"sequence file {src} does not exist")
            records = data.load_sequences(src)
            data.save_sequences(records, stage / "sequences.csv")
            if not cfg["data"]["embeddings"]:
                raise ConfigError("data.embeddings must list at least one .fdde file")
            for path in cfg["data"]["embeddings"]:
                if not Path(path).exists():
                    raise MissingArtifactError(f"embedding file {path} does not exist")
                matrix = data.load_embeddings(path)
                if matrix.n != len(records):
                    raise ConfigError(
                        f"{path}: {matrix.n} embedding rows but {len(records)} sequences"
                    )
                data.save_embeddings(matrix, stage / f"L{matrix.layer}.fdde")
        records = data.load_sequences(stage / "sequences.csv")
        ratios = tuple(cfg["split"]["ratios"])
        split = data.split_dataset(len(records), ratios, seed)
        with open(stage / "split.json", "w") as fh:
            json.dump(
                {
                    "train": split.train.tolist(),
                    "val": split.val.tolist(),
                    "test": split.test.tolist(),
                    "seed": seed,
                    "ratios": list(ratios),
                },
                fh,
            )

    run_stage(out, "ingest", cfg, seed, build)


def _load_ingest(out: Path):
    stage = require_stage(out, "ingest")
    records = data.load_sequences(stage / "sequences.csv")
    with open(stage / "split.json") as fh:
        sp = json.load(fh)
    split = data.DatasetSplit(
        train=np.asarray(sp["train"]), val=np.asarray(sp["val"]), test=np.asarray(sp["test"]), seed=sp["seed"]
    )
    layer_files = sorted(stage.glob("L*.fdde"), key=lambda p: int(p.stem[1:]))
    if not layer_files:
        raise MissingArtifactError(f"no layer embeddings under {stage}")
    return stage, records, split, layer_files


# ---------------------------------------------------------------------------
# diffuse
# ---------------------------------------------------------------------------


def _targets(records, task: str) -> np.ndarray:
    if task == "regression":
        values = [r.value for r in records]
        if any(v is None for v in values):
            raise ConfigError("forest.task is regression but some records have no value")
        return np.asarray(values, dtype=float)
    labels = [r.label for r in records]
    if any(l is None for l in labels):
        raise ConfigError("forest.task is classification but some records have no label")
    return np.asarray(labels, dtype=int)


def diffuse_layer(E: np.ndarray, y: np.ndarray, split: data.DatasetSplit, cfg: dict, seed: int):
    """Forest -> proximities -> operator -> potential coords -> trained RFAE -> latents.

    The forest and every trained component see only the training split;
    validation/test rows enter through out-of-sample proximities.
    """
    tr = split.train
    fr = forest.fit_forest(E[tr], y[tr], _forest_config(cfg, seed))
    prox = forest.proximity_matrix(fr)
    kern = cfg["kernel"]
    op = diffusion.operator_from_proximity(prox, mode=kern["mode"], k=kern["k"], alpha=kern["alpha"])
    t_used = kern["t"] or diffusion.vne_select_t(op, kern["t_max"], default_t=kern["default_t"])
    coords = diffusion.potential_coordinates(op, t_used, cfg["rfae"]["n_components"])
    model, log = rfae.train_rfae(prox, coords, lam=cfg["rfae"]["lambda"], config=_rfae_config(cfg, seed))
    Z = np.zeros((len(E), coords.d))
    Z[tr] = rfae.encode(model, rfae.renormalize_rows(prox.K))
    rest = np.concatenate([split.val, split.test])
    if len(rest):
        Z[rest] = rfae.encode(model, forest.oos_proximity(fr, E[rest]))
    return fr, prox, op, t_used, coords, model, log, Z


def cmd_diffuse(cfg: dict, seed: int, out: Path) -> None:
    ingest_dir, records, split, layer_files = _load_ingest(out)
    y = _targets(records, cfg["forest"]["task"])

    def build(stage: Path):
        for lf in layer_files:
            matrix = data.load_embeddings(lf)
            ldir = stage / f"L{matrix.layer}"
            ldir.mkdir()
            E = matrix.data.astype(float)
            fr, prox, op, t_used, coords, model, log, Z = diffuse_layer(E, y, split, cfg, seed)
            forest.save_forest(fr, ldir / "forest.pkl")
            forest.export_proximity_csv(prox, ldir / "prox_triplets.csv")
            data.save_embeddings(data.EmbeddingMatrix(-1, prox.K.astype(np.float32)), ldir / "prox.fdde")
            data.save_embeddings(data.EmbeddingMatrix(-1, op.P.astype(np.float32)), ldir / "operator.fdde")
            _write_matrix_csv(
                ldir / "operator.csv",
                [f"p_{j}" for j in range(op.n)],
                ([float(v) for v in row] for row in op.P),
            )
            data.save_embeddings(data.EmbeddingMatrix(-1, coords.Z.astype(np.float32)), ldir / "zg.fdde")
            _write_matrix_csv(
                ldir / "zg.csv",
                [f"z_{i + 1}" for i in range(coords.Z.shape[1])],
                ([float(v) for v in row] for row in coords.Z),
            )
            data.save_embeddings(data.EmbeddingMatrix(matrix.layer, Z.astype(np.float32)), ldir / "latents.fdde")
            nn.save_mlp(model.encoder, ldir / "encoder.fddm")
            nn.save_mlp(model.decoder, ldir / "decoder.fddm")
            with open(ldir / "rfae_meta.json", "w") as fh:
                json.dump(
                    {
                        "lambda": model.lam,
                        "d": model.d,
                        "n_prox": model.n_prox,
                        "input_scale": model.input_scale,
                        "target_mean": model.target_mean.tolist(),
                        "target_std": model.target_std.tolist(),
                        "t_used": t_used,
                        "clipped_variance": coords.clipped_variance,
                    },
                    fh,
                )
            rfae.write_training_log(log, ldir / "train_log.csv")
            part = {}
            for name, idx in (("train", split.train), ("val", split.val), ("test", split.test)):
                part.update({int(i): name for i in idx})
            _write_matrix_csv(
                ldir / "latents.csv",
                ["id", *(f"z_{i + 1}" for i in range(Z.shape[1])), "label", "split"],
                (
                    [records[i].id, *map(float, Z[i]),
                     "" if records[i].label is None else records[i].label,
                     part[i]]
                    for i in range(len(records))
                ),
            )

    run_stage(out, "diffuse", cfg, seed, build)


def _load_rfae(ldir: Path) -> rfae.RfaeModel:
    with open(ldir / "rfae_meta.json") as fh:
        meta = json.load(fh)
    return rfae.RfaeModel(
        encoder=nn.load_mlp(ldir / "encoder.fddm"),
        decoder=nn.load_mlp(ldir / "decoder.fddm"),
        lam=meta["lambda"],
        d=meta["d"],
        n_prox=meta["n_prox"],
        target_mean=np.asarray(meta["target_mean"]),
        target_std=np.asarray(meta["target_std"]),
        input_scale=meta["input_scale"],
    )


def _layer_dirs(out: Path) -> list[Path]:
    stage = require_stage(out, "diffuse")
    dirs = sorted(stage.glob("L*"), key=lambda p: int(p.name[1:]))
    if not dirs:
        raise MissingArtifactError(f"no per-layer artifacts under {stage}")
    return dirs


def _pick_layer(out: Path, wanted: int) -> Path:
    dirs = _layer_dirs(out)
    if wanted < 0:
        return dirs[0]
    for d in dirs:
        if int(d.name[1:]) == wanted:
            return d
    raise MissingArtifactError(f"layer {wanted} not found under {out / 'diffuse'}")


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def cmd_probe(cfg: dict, seed: int, out: Path) -> None:
    ingest_dir, records, split, layer_files = _load_ingest(out)
    labels = _targets(records, "classification")
    methods = cfg["probe"]["methods"]
    pcfg = _probe_config(cfg, seed)

    def build(stage: Path):
        rows = []
        for lf in layer_files:
            matrix = data.load_embeddings(lf)
            E = matrix.data.astype(float)
            for method in methods:
                if method == "none":
                    Z = E
                elif method == "ae":
                    p = cfg["probe"]
                    ae_cfg = rfae.RfaeConfig(
                        hidden=tuple(p["ae_hidden"]),
                        epochs=p["ae_epochs"],
                        lr_max=cfg["rfae"]["lr_max"],
                        patience=p["patience"],
                        seed=seed,
                    )
                    model, _mse = rfae.train_plain_ae(E[split.train], cfg["rfae"]["n_components"], ae_cfg)
                    Z = model.encoder.forward(E)
                    rows.append([f"ae_recon_mse", matrix.layer, float(_mse), 0])
                elif method == "fdd":
                    ldir = _pick_layer(out, matrix.layer)
                    Z = data.load_embeddings(ldir / "latents.fdde").data.astype(float)
                else:
                    raise ConfigError(f"unknown probe method {method!r}")
                result = decode.train_probe(Z, labels, split, pcfg, layer=matrix.layer)
                rows.append([method, matrix.layer, result.auc, 0])
        # flag the best layer within each method
        for method in {r[0] for r in rows}:
            idx = [i for i, r in enumerate(rows) if r[0] == method]
            if method.endswith("recon_mse"):
                continue
            best = max(idx, key=lambda i: rows[i][2])
            rows[best][3] = 1
        _write_matrix_csv(stage / "auc_table.csv", ["method", "layer", "auc", "best"], rows)

    run_stage(out, "probe", cfg, seed, build)


# ---------------------------------------------------------------------------
# retrieve
# ---------------------------------------------------------------------------


def cmd_retrieve(cfg: dict, seed: int, out: Path) -> None:
    ingest_dir, records, split, layer_files = _load_ingest(out)
    labels = _targets(records, "classification")
    if len(split.test) == 0:
        raise ConfigError("retrieval needs a non-empty held-out (test) split")

    def build(stage: Path):
        ldir = _pick_layer(out, cfg["retrieve"]["layer"])
        layer = int(ldir.name[1:])
        E = data.load_embeddings(ingest_dir / f"L{layer}.fdde").data.astype(float)
        fr = forest.load_forest(ldir / "forest.pkl")
        model = _load_rfae(ldir)
        Z = data.load_embeddings(ldir / "latents.fdde").data.astype(float)
        held = split.test
        queries = rfae.encode(model, forest.oos_proximity(fr, E[held]))
        k = cfg["retrieve"]["k"]
        scores = decode.knn_retrieve(Z[split.train], labels[split.train], queries, k=k)
        n_retrieve = cfg["retrieve"]["n_retrieve"] or None
        p_amp = decode.retrieval_p_amp(scores, labels[held], n_retrieve)
        rows = [["p_amp_fdd", p_amp]]
        raw_path = ingest_dir / "raw_features.fdde"
        if raw_path.exists():
            raw = data.load_embeddings(raw_path).data.astype(float)
            baseline = forest.fit_forest(raw[split.train], labels[split.train], _forest_config(cfg, seed))
            raw_scores = baseline.predict_scores(raw[held])[:, 1]
            rows.append(["p_amp_rf_raw", decode.retrieval_p_amp(raw_scores, labels[held], n_retrieve)])
        _write_matrix_csv(stage / "retrieval.csv", ["metric", "value"], rows)
        _write_matrix_csv(
            stage / "per_query.csv",
            ["index", "id", "score", "label"],
            ([int(i), records[i].id, float(s), int(labels[i])] for i, s in zip(held, scores)),
        )

    run_stage(out, "retrieve", cfg, seed, build)


# ---------------------------------------------------------------------------
# interpolate
# ---------------------------------------------------------------------------


def cmd_interpolate(cfg: dict, seed: int, out: Path) -> None:
    ingest_dir, records, split, layer_files = _load_ingest(out)

    def build(stage: Path):
        ldir = _pick_layer(out, cfg["interpolate"]["layer"])
        layer = int(ldir.name[1:])
        E = data.load_embeddings(ingest_dir / f"L{layer}.fdde").data.astype(float)
        prox = data.load_embeddings(ldir / "prox.fdde").data.astype(float)
        model = _load_rfae(ldir)
        Z = data.load_embeddings(ldir / "latents.fdde").data.astype(float)
        tr = split.train

        m = cfg["manifold"]
        mm_cfg = decode.ManifoldMlpConfig(
            hidden=tuple(m["hidden"]) or None,
            residual_scale=m["residual_scale"],
            epochs=m["epochs"],
            batch_size=m["batch_size"],
            lr_start=m["lr_start"],
            lr_max=m["lr_max"],
            weight_decay=m["weight_decay"],
            patience=m["patience"],
            seed=seed,
        )
        P_rows = rfae.renormalize_rows(prox)
        mm, mm_mse = decode.train_manifold_mlp(P_rows, E[tr], mm_cfg)

        labels = np.asarray([r.label if r.label is not None else 0 for r in records])
        src_idx = tr[labels[tr] == 0]
        tgt_idx = tr[labels[tr] == 1]
        if len(src_idx) == 0 or len(tgt_idx) == 0:
            raise ConfigError("interpolation needs both labeled regions in the training split")
        o = cfg["ode"]
        if o["solver"] != "rk4":
            raise ConfigError(f"only the rk4 solver is supported, got {o['solver']!r}")
        if o["loss"] != "sinkhorn" or o["p"] != 2:
            raise ConfigError("only the sinkhorn loss with cost exponent 2 is supported")
        ode_cfg = transport.OdeTrainConfig(
            t_start=o["t_start"],
            t_end=o["t_end"],
            n_timepoints=o["train_timepoints"] or o["n_timepoints"],
            blur=o["blur"],
            scaling=o["scaling"],
            lr=o["lr"],
            epochs=o["num_epochs"],
            batch_size=o["batch_size"],
            hidden=tuple(o["hidden"]),
            sinkhorn_tol=o["sinkhorn_tol"],
            sinkhorn_max_iter=o["sinkhorn_max_iter"],
            seed=seed,
        )
        field, history = transport.train_interpolant(Z[src_idx], Z[tgt_idx], ode_cfg)
        nn.save_mlp(field.net, stage / "field.fddm")
        _write_matrix_csv(stage / "ode_loss.csv", ["epoch", "loss"], list(enumerate(history)))

        z0 = Z[src_idx[cfg["interpolate"]["source_index"]]]
        traj = transport.sample_trajectory(field, z0, o["n_timepoints"])
        transport.write_trajectory_csv(traj, stage / "trajectory.csv")

        p_hat = rfae.decode(model, traj.states)
        e_hat = mm.forward(p_hat)
        bank = data.EmbeddingMatrix(layer, E[tr].astype(np.float32))
        bank_records = [records[i] for i in tr]
        seqs = [decode.decode_to_sequence(e, bank, bank_records)[0].sequence for e in e_hat]
        decode.write_descriptor_csv(traj.times, seqs, stage / "descriptors.csv")

        charges = np.array([decode.net_charge(s) for s in seqs])
        pis = np.array([decode.isoelectric_point(s) for s in seqs])
        hydros = np.array([decode.hydrophobic_ratio(s) for s in seqs])
        write_svg_lines(stage / "net_charge.svg", traj.times, {"net charge": charges}, "Net charge along trajectory")
        write_svg_lines(stage / "isoelectric_point.svg", traj.times, {"pI": pis}, "Isoelectric point along trajectory")
        write_svg_lines(stage / "hydrophobic_ratio.svg", traj.times, {"ratio": hydros}, "Hydrophobic ratio along trajectory")
        write_svg_lines(
            stage / "latent_trajectory.svg",
            traj.states[:, 0],
            {"z2(z1)": traj.states[:, 1] if traj.states.shape[1] > 1 else traj.states[:, 0]},
            "Latent trajectory",
        )
        _write_matrix_csv(stage / "interpolate_summary.csv", ["metric", "value"],
                          [["manifold_val_mse", mm_mse],
                           ["ode_loss_first", history[0]],
                           ["ode_loss_last", history[-1]]])

    run_stage(out, "interpolate", cfg, seed, build)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(cfg: dict, seed: int, out: Path) -> None:
    def build(stage: Path):
        rows = []
        for name in ("probe", "retrieve", "interpolate"):
            path = out / name
            if not (path / "manifest.json").exists():
                continue
            for csv_file in sorted(path.glob("*.csv")):
                with open(csv_file) as fh:
                    header = fh.readline().strip().split(",")
                    for line in fh:
                        rows.append([name, csv_file.name, line.strip()])
        if not rows:
            raise MissingArtifactError("no completed stages to report on")
        with open(stage / "report.csv", "w") as fh:
            fh.write("stage,file,row\n")
            for stage_name, fname, row in rows:
                fh.write(f'{stage_name},{fname},"{row}"\n')
        print(f"collated {len(rows)} metric rows from {out}")

    run_stage(out, "report", cfg, seed, build)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "ingest": cmd_ingest,
    "diffuse": cmd_diffuse,
    "probe": cmd_probe,
    "retrieve": cmd_retrieve,
    "interpolate": cmd_interpolate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fdd", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="TOML config file (defaults used if omitted)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="run directory owning all stage artifacts")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        fdd_threads()
        COMMANDS[args.command](cfg, args.seed, Path(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FloatingPointError, ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
