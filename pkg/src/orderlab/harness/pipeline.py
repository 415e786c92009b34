"""End-to-end experiment pipeline with resumable, deterministic stages.

Stage order: data -> clean_model -> inject -> poisoned_model -> dualview
-> detect -> influence -> rectify -> final. Every stage derives its
randomness from a fixed label off the root seed, writes its artifacts
atomically, and can be reloaded on --resume; a resumed run therefore
produces byte-identical reports. Wall-clock timings go to a separate
timings.json, keeping metrics.json deterministic.

The clean and poisoned target models share initialization and training
randomness (labels "target-init"/"target-train"), so a zero-injection run
yields bitwise-identical clean and compromised checkpoints and metrics,
and injected runs differ only through the data.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time

import numpy as np

from .. import detector, injector, rectifier, semantics as semantics_mod
from ..checkpoint import load_checkpoint, save_checkpoint
from ..corpus import Corpus, build_corpus, leave_one_out, load_interactions, synth_corpus
from ..dualview import DualViewConfig, DualViewModel
from ..errors import InvalidArgument
from ..numkit import SeededRng
from ..params import ParamVector
from ..seqrec import ModelConfig, SeqRecModel
from .config import ExperimentConfig
from .metrics import convergence_report, evaluate_topk

log = logging.getLogger(__name__)

STAGES = (
    "data",
    "clean_model",
    "inject",
    "poisoned_model",
    "dualview",
    "detect",
    "influence",
    "rectify",
    "final",
)

SWEEP_VARIANTS = ("clean", "repetitive", "semantic", "sequential")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def write_json(path: str, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()[:16]


def _have(*paths) -> bool:
    return all(os.path.exists(p) for p in paths)


class Pipeline:
    """Holds the configuration, the output directory and loaded artifacts."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str, resume: bool = False):
        self.cfg = cfg
        self.out = out_dir
        self.resume = resume
        self.root = SeededRng(cfg.seed)
        self.ctx: dict = {}
        self.timings: dict[str, float] = {}
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    # -- stages --------------------------------------------------------------

    def stage_data(self) -> None:
        cfg = self.cfg
        corpus_path = self.path("corpus_clean.json")
        sem_path = self.path("semantics.tsv")
        cats_path = self.path("categories.json")
        need_cats = cfg.data.source == "synth"
        if self.resume and _have(corpus_path, sem_path) and (not need_cats or _have(cats_path)):
            corpus = Corpus.load(corpus_path)
            table = semantics_mod.load_semantic_tsv(sem_path, corpus)
            categories = (
                np.asarray(read_json(cats_path)["categories"], dtype=np.int64)
                if need_cats
                else None
            )
        else:
            if cfg.data.source == "synth":
                corpus, categories = synth_corpus(cfg.data.synth, self.root.child("synth"))
            elif cfg.data.source == "tsv":
                raw = load_interactions(cfg.data.path)
                corpus = build_corpus(raw, cfg.data.min_user, cfg.data.min_item)
                categories = None
            else:
                raise InvalidArgument(f"unknown data source {cfg.data.source!r}")
            if cfg.semantics.source == "synth":
                if categories is None:
                    raise InvalidArgument("synthetic semantics need a synthetic corpus")
                table = semantics_mod.synth_semantics(
                    categories, cfg.semantics.dim, cfg.semantics.noise_sigma,
                    self.root.child("semantics"),
                )
            elif cfg.semantics.source == "tsv":
                table = semantics_mod.load_semantic_tsv(cfg.semantics.path, corpus)
            else:
                raise InvalidArgument(f"unknown semantics source {cfg.semantics.source!r}")
            corpus.save(corpus_path)
            semantics_mod.save_semantic_tsv(table, corpus, sem_path)
            if categories is not None:
                write_json(cats_path, {"categories": categories.tolist()})
            # persisted values are what later stages must see: reload
            table = semantics_mod.load_semantic_tsv(sem_path, corpus)
        self.ctx["corpus"] = corpus
        self.ctx["semantics"] = table
        self.ctx["categories"] = categories
        self.ctx["reduced"] = semantics_mod.reduce(table, cfg.model.hidden)
        self.ctx["split"] = leave_one_out(corpus)

    def _target_model(self) -> SeqRecModel:
        cfg = self.cfg
        return SeqRecModel(
            ModelConfig(
                vocab=self.ctx["corpus"].n_items,
                hidden=cfg.model.hidden,
                max_len=cfg.model.max_len,
                init_scale=cfg.model.init_scale,
            )
        )

    def _train_target(self, corpus: Corpus, ckpt: str, trace_path: str):
        model = self.ctx["target_model"]
        if self.resume and _have(ckpt, trace_path):
            _, _, flat = load_checkpoint(ckpt)
            return ParamVector(model.registry, flat), read_json(trace_path)["trace"]
        init = model.init_params(self.root.child("target-init"))
        prefixes = [corpus.train_prefix(u) for u in range(corpus.n_users)]
        params, trace = model.train(
            init, prefixes, self.cfg.target_train, self.root.child("target-train")
        )
        save_checkpoint(ckpt, model.ARCH, dataclasses.asdict(model.cfg), params.flat)
        write_json(trace_path, {"trace": trace})
        return params, trace

    def stage_clean_model(self) -> None:
        self.ctx["target_model"] = self._target_model()
        params, trace = self._train_target(
            self.ctx["corpus"], self.path("target_clean.ckpt"), self.path("trace_clean.json")
        )
        self.ctx["clean_params"] = params
        self.ctx["clean_trace"] = trace

    def stage_inject(self) -> None:
        cfg = self.cfg
        poisoned_path = self.path("corpus_poisoned.json")
        manifest_path = self.path("manifest.json")
        if self.resume and _have(poisoned_path, manifest_path):
            poisoned = Corpus.load(poisoned_path)
            manifest = injector.FakeOrderManifest.load(manifest_path)
        elif cfg.injection.user_ratio == 0.0 or cfg.injection.intensity == 0.0:
            poisoned = self.ctx["corpus"]
            manifest = injector.FakeOrderManifest([], {"disabled": True}, cfg.seed)
            poisoned.save(poisoned_path)
            manifest.save(manifest_path)
        else:
            poisoned, manifest = injector.inject(
                self.ctx["corpus"], self.ctx["semantics"], cfg.injection, self.root.child("inject")
            )
            poisoned.save(poisoned_path)
            manifest.save(manifest_path)
        self.ctx["poisoned"] = poisoned
        self.ctx["manifest"] = manifest
        self.ctx["poisoned_split"] = leave_one_out(poisoned)

    def stage_poisoned_model(self) -> None:
        params, trace = self._train_target(
            self.ctx["poisoned"], self.path("target_poisoned.ckpt"), self.path("trace_poisoned.json")
        )
        self.ctx["poisoned_params"] = params
        self.ctx["poisoned_trace"] = trace

    def stage_dualview(self) -> None:
        cfg = self.cfg
        corpus = self.ctx["poisoned"]
        table = self.ctx["semantics"]
        model = DualViewModel(
            DualViewConfig(
                vocab=corpus.n_items,
                sem_dim=table.dim,
                hidden=cfg.model.hidden,
                max_len=cfg.model.max_len,
                init_scale=cfg.model.init_scale,
                residual_coef=cfg.model.residual_coef,
            ),
            table.embeddings,
            self.ctx["reduced"],
        )
        self.ctx["dualview_model"] = model
        ckpt = self.path("dualview.ckpt")
        trace_path = self.path("trace_dualview.json")
        if self.resume and _have(ckpt, trace_path):
            _, _, flat = load_checkpoint(ckpt)
            self.ctx["dualview_params"] = ParamVector(model.registry, flat)
            self.ctx["dualview_trace"] = read_json(trace_path)["trace"]
            return
        init = model.init_params(self.root.child("dualview-init"))
        prefixes = [corpus.train_prefix(u) for u in range(corpus.n_users)]
        train_cfg = dataclasses.replace(
            cfg.dualview_train, batch_size=cfg.dualview_loss.batch_size
        )
        params, trace = model.train(
            init, prefixes, cfg.dualview_loss, train_cfg, self.root.child("dualview-train")
        )
        save_checkpoint(
            ckpt,
            model.ARCH,
            {"model": dataclasses.asdict(model.cfg)},
            params.flat,
        )
        write_json(trace_path, {"trace": trace})
        self.ctx["dualview_params"] = params
        self.ctx["dualview_trace"] = trace

    def stage_detect(self) -> None:
        csv_path = self.path("detection.csv")
        json_path = self.path("detection.json")
        manifest = self.ctx["manifest"]
        if self.resume and _have(csv_path, json_path):
            doc = read_json(json_path)
            self.ctx["detect_summary"] = doc["summary"]
            self.ctx["suspicious"] = [tuple(x) for x in doc["suspicious"]]
            return
        report = detector.detect(
            self.ctx["poisoned"],
            self.ctx["dualview_model"],
            self.ctx["dualview_params"],
            self.ctx["semantics"],
            self.cfg.detector,
            self.cfg.injection,
            self.root.child("detect"),
            manifest=manifest,
        )
        truth = {(e.user, e.position): e.kind for e in manifest.entries}
        report.to_csv(csv_path, truth)
        write_json(
            json_path,
            {"summary": report.summary, "suspicious": [[u, p] for u, p in report.suspicious]},
        )
        self.ctx["detect_summary"] = _jsonable(report.summary)
        self.ctx["suspicious"] = report.suspicious
        self.ctx["detect_report"] = report

    def stage_influence(self) -> None:
        csv_path = self.path("influence.csv")
        json_path = self.path("influence.json")
        manifest = self.ctx["manifest"]
        truth = {(e.user, e.position): e.kind for e in manifest.entries}
        if self.resume and _have(csv_path, json_path):
            doc = read_json(json_path)
            self.ctx["influence_summary"] = doc
            self.ctx["harmful"] = [tuple(x) for x in doc["harmful"]]
            self.ctx["influence_samples"] = [tuple(x) for x in doc["samples"]]
            self.ctx["influence_values"] = np.asarray(doc["values"])
            return
        corpus = self.ctx["poisoned"]
        split = self.ctx["poisoned_split"]
        model = self.ctx["target_model"]
        params = self.ctx["poisoned_params"]
        suspicious = [
            (u, p) for u, p in self.ctx["suspicious"] if p >= 1  # terms need a left context
        ]
        flagged = set(self.ctx["suspicious"])
        pairs = []
        for i, user in enumerate(split.users):
            vpos = len(corpus.sequences[user]) - 2
            if (user, vpos) not in flagged:
                pairs.append((split.prefixes[i], int(split.valid_targets[i])))
        prefixes = [corpus.train_prefix(u) for u in range(corpus.n_users)]
        report = rectifier.influence_report(
            model, params, prefixes, suspicious, pairs,
            self.cfg.influence, self.root.child("influence"),
        )
        harmful = report.harmful
        doc = {
            "samples": [[u, p] for u, p in report.samples],
            "values": [float(v) for v in report.values],
            "harmful": [[u, p] for u, p in harmful],
            "threshold": report.threshold,
            "scale": report.scale,
            "residual": report.residual,
            "validation_grad_norm": report.validation_grad_norm,
            "clean_validation_pairs": len(pairs),
        }
        write_json(json_path, doc)
        tmp = f"{csv_path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("user,position,truth_type,influence,harmful\n")
            for (u, p), v in zip(report.samples, report.values):
                fh.write(
                    f"{u},{p},{truth.get((u, p), '')},{float(v)!r},{int(v > report.threshold)}\n"
                )
        os.replace(tmp, csv_path)
        self.ctx["influence_summary"] = _jsonable(doc)
        self.ctx["harmful"] = harmful
        self.ctx["influence_samples"] = report.samples
        self.ctx["influence_values"] = report.values

    def stage_rectify(self) -> None:
        ckpt = self.path("rectified.ckpt")
        trace_path = self.path("rectify_trace.json")
        model = self.ctx["target_model"]
        if self.resume and _have(ckpt, trace_path):
            _, _, flat = load_checkpoint(ckpt)
            self.ctx["rectified_params"] = ParamVector(model.registry, flat)
            self.ctx["rectify_trace"] = read_json(trace_path)
            return
        corpus = self.ctx["poisoned"]
        split = self.ctx["poisoned_split"]
        prefixes = [corpus.train_prefix(u) for u in range(corpus.n_users)]
        flagged = set(self.ctx["suspicious"])
        clean_pool = [
            (u, p)
            for u in range(corpus.n_users)
            for p in range(1, len(prefixes[u]))
            if (u, p) not in flagged
        ]
        eval_rng = self.root.child("eval")

        def eval_fn(params):
            rep = evaluate_topk(
                model, params, corpus, split, mode="valid",
                negatives=self.cfg.eval.negatives, ks=(10,), rng=eval_rng,
            )
            return rep["NDCG@10"]

        rectified, trace = rectifier.rectify(
            model,
            self.ctx["poisoned_params"],
            prefixes,
            self.ctx["harmful"],
            clean_pool,
            eval_fn,
            self.cfg.rectify,
            self.root.child("rectify"),
        )
        save_checkpoint(ckpt, model.ARCH, dataclasses.asdict(model.cfg), rectified.flat)
        doc = {
            "initial_value": trace.initial_value,
            "rounds": trace.rounds,
            "best_round": trace.best_round,
            "stopped_early": trace.stopped_early,
        }
        write_json(trace_path, doc)
        self.ctx["rectified_params"] = rectified
        self.ctx["rectify_trace"] = doc

    def stage_final(self) -> None:
        metrics_path = self.path("metrics.json")
        if self.resume and _have(metrics_path):
            self.ctx["metrics"] = read_json(metrics_path)
            return
        cfg = self.cfg
        model = self.ctx["target_model"]
        eval_rng = self.root.child("eval")

        def both_modes(params, corpus, split):
            return {
                mode: evaluate_topk(
                    model, params, corpus, split, mode=mode,
                    negatives=cfg.eval.negatives, ks=cfg.eval.ks, rng=eval_rng,
                )
                for mode in ("valid", "test")
            }

        clean_split = self.ctx["split"]
        poisoned_split = self.ctx["poisoned_split"]
        traces = {
            "target_clean": self.ctx["clean_trace"],
            "target_poisoned": self.ctx["poisoned_trace"],
            "dualview": self.ctx["dualview_trace"],
        }
        metrics = {
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "clean": both_modes(self.ctx["clean_params"], self.ctx["corpus"], clean_split),
            "compromised": both_modes(self.ctx["poisoned_params"], self.ctx["poisoned"], poisoned_split),
            "rectified": both_modes(self.ctx["rectified_params"], self.ctx["poisoned"], poisoned_split),
            "convergence": convergence_report(traces),
            "rectify": {
                "rounds_used": len(self.ctx["rectify_trace"]["rounds"]),
                "best_round": self.ctx["rectify_trace"]["best_round"],
                "stopped_early": self.ctx["rectify_trace"]["stopped_early"],
            },
            "detection": self.ctx["detect_summary"],
            "checkpoints": {
                name: file_digest(self.path(fname))
                for name, fname in (
                    ("clean", "target_clean.ckpt"),
                    ("compromised", "target_poisoned.ckpt"),
                    ("dualview", "dualview.ckpt"),
                    ("rectified", "rectified.ckpt"),
                )
                if os.path.exists(self.path(fname))
            },
        }
        key = f"NDCG@{cfg.eval.ks[0]}"
        clean_v = metrics["clean"]["test"][key]
        comp_v = metrics["compromised"]["test"][key]
        rect_v = metrics["rectified"]["test"][key]
        gap = clean_v - comp_v
        metrics["gap_recovery"] = {
            "metric": key,
            "clean": clean_v,
            "compromised": comp_v,
            "rectified": rect_v,
            "gap": gap,
            "recovered_fraction": (rect_v - comp_v) / gap if gap > 0 else None,
        }
        write_json(metrics_path, metrics)
        self.ctx["metrics"] = read_json(metrics_path)

    def run(self, stop_after: str = "final") -> dict:
        if stop_after not in STAGES:
            raise InvalidArgument(f"unknown stage {stop_after!r}")
        self.cfg.save(self.path("config.json"))
        stage_fns = {
            "data": self.stage_data,
            "clean_model": self.stage_clean_model,
            "inject": self.stage_inject,
            "poisoned_model": self.stage_poisoned_model,
            "dualview": self.stage_dualview,
            "detect": self.stage_detect,
            "influence": self.stage_influence,
            "rectify": self.stage_rectify,
            "final": self.stage_final,
        }
        for name in STAGES:
            start = time.perf_counter()
            try:
                stage_fns[name]()
            except Exception:
                log.error("pipeline stage %r failed; earlier artifacts are preserved", name)
                raise
            self.timings[name] = time.perf_counter() - start
            log.info("stage %s done in %.2fs", name, self.timings[name])
            if name == stop_after:
                break
        write_json(self.path("timings.json"), self.timings)
        return self.ctx


def run_pipeline(
    cfg: ExperimentConfig, out_dir: str, resume: bool = False, stop_after: str = "final"
) -> dict:
    return Pipeline(cfg, out_dir, resume=resume).run(stop_after)


def fake_order_effect_sweep(
    cfg: ExperimentConfig,
    out_dir: str,
    variants=SWEEP_VARIANTS,
    resume: bool = False,
) -> list[dict]:
    """Train and evaluate the target model under per-type injections.

    The clean variant is exactly the pipeline's clean baseline (same seeds,
    same artifacts). Rows land in effects.csv alongside returned dicts.
    """
    pipe = Pipeline(cfg, out_dir, resume=resume)
    pipe.run(stop_after="clean_model")
    corpus = pipe.ctx["corpus"]
    split = pipe.ctx["split"]
    model = pipe.ctx["target_model"]
    eval_rng = pipe.root.child("eval")
    mixes = {
        "repetitive": (1.0, 0.0, 0.0),
        "semantic": (0.0, 1.0, 0.0),
        "sequential": (0.0, 0.0, 1.0),
    }
    rows = []
    for variant in variants:
        if variant == "clean":
            params = pipe.ctx["clean_params"]
            trace = pipe.ctx["clean_trace"]
            var_corpus, var_split = corpus, split
        else:
            if variant not in mixes:
                raise InvalidArgument(f"unknown sweep variant {variant!r}")
            inj = dataclasses.replace(cfg.injection, type_mix=mixes[variant])
            ckpt = pipe.path(f"target_sweep_{variant}.ckpt")
            trace_path = pipe.path(f"trace_sweep_{variant}.json")
            manifest_path = pipe.path(f"manifest_sweep_{variant}.json")
            corpus_path = pipe.path(f"corpus_sweep_{variant}.json")
            if resume and _have(ckpt, trace_path, corpus_path):
                var_corpus = Corpus.load(corpus_path)
                _, _, flat = load_checkpoint(ckpt)
                params = ParamVector(model.registry, flat)
                trace = read_json(trace_path)["trace"]
            else:
                var_corpus, manifest = injector.inject(
                    corpus, pipe.ctx["semantics"], inj, pipe.root.child(f"sweep-inject-{variant}")
                )
                var_corpus.save(corpus_path)
                manifest.save(manifest_path)
                init = model.init_params(pipe.root.child("target-init"))
                prefixes = [var_corpus.train_prefix(u) for u in range(var_corpus.n_users)]
                params, trace = model.train(
                    init, prefixes, cfg.target_train, pipe.root.child("target-train")
                )
                save_checkpoint(ckpt, model.ARCH, dataclasses.asdict(model.cfg), params.flat)
                write_json(trace_path, {"trace": trace})
            var_split = leave_one_out(var_corpus)
        report = evaluate_topk(
            model, params, var_corpus, var_split, mode="test",
            negatives=cfg.eval.negatives, ks=cfg.eval.ks, rng=eval_rng,
        )
        conv = convergence_report({"train": trace})["train"]
        row = {"variant": variant, "seed": cfg.seed, "convergence_epochs": conv["reported"]}
        row.update({k: v for k, v in report.items() if k.startswith(("HR@", "NDCG@"))})
        rows.append(row)
    csv_path = pipe.path("effects.csv")
    keys = ["variant", "seed", "convergence_epochs"] + [
        k for k in rows[0] if k.startswith(("HR@", "NDCG@"))
    ]
    tmp = f"{csv_path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in keys) + "\n")
    os.replace(tmp, csv_path)
    return rows
