"""Stage pipeline with a content-hash manifest.

Every stage reads its inputs from the working directory, writes its
outputs there, and appends a manifest entry of its config hash and input
hashes. Re-running a stage whose hashes match the manifest is a no-op
unless forced. All randomness flows from seeds named in the config; a
missing seed is a configuration error, never an implicit default.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import time
from pathlib import Path

from . import contrastive, corpus, emrefine, evaluation, pairs, prompts, rqkmeans
from .decoding import beam_search_many, build_sid_trie, clip_prompt
from .embed import hash_embed, load_embeddings, save_embeddings
from .model import TinyDecoder, load_checkpoint, save_checkpoint, train
from .vocab import build_vocab, load_vocab, save_vocab

log = logging.getLogger(__name__)

DATASET_FILES = ("dataset/pois.jsonl", "dataset/interactions.jsonl", "dataset/split.json")

_REQUIRED_SEEDS = (
    "embed.seed", "pairs.seed", "contrastive.seed", "rq.seed",
    "model.seed", "cpt.seed", "sft.seed", "em.seed", "eval.seed",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def validate_config(cfg: dict) -> None:
    if "data" not in cfg or not ({"synth", "tsv"} & set(cfg["data"])):
        raise StageError("config", "config.data must provide 'synth' or 'tsv'")
    if "synth" in cfg["data"] and "seed" not in cfg["data"]["synth"]:
        raise StageError("config", "missing seed: data.synth.seed")
    for dotted in _REQUIRED_SEEDS:
        section, key = dotted.split(".")
        if key not in cfg.get(section, {}):
            raise StageError("config", f"missing seed: {dotted}")


class Pipeline:
    """Runs pipeline stages against one working directory."""

    STAGE_ORDER = ("data", "embed", "pairs", "contrast", "tokenize", "em",
                   "cpt", "sft", "predict", "eval")

    def __init__(self, config: dict, workdir: str | Path, force: bool = False):
        validate_config(config)
        self.cfg = config
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.force = force
        self._manifest_path = self.workdir / "manifest.jsonl"
        self._cache: dict[str, object] = {}

    # -- config helpers ------------------------------------------------

    def enabled(self, stage: str) -> bool:
        return bool(self.cfg.get(stage, {}).get("enabled", True))

    @property
    def sids_artifact(self) -> str:
        return "sids_em.json" if self.enabled("em") else "sids.json"

    @property
    def embeddings_artifact(self) -> str:
        source = self.cfg.get("rq", {}).get("input", "refined")
        if source not in ("refined", "base"):
            raise StageError("tokenize", f"rq.input must be 'refined' or 'base', got {source!r}")
        return "embeddings_refined.gemb" if source == "refined" else "embeddings_base.gemb"

    # -- manifest ------------------------------------------------------

    def _manifest(self) -> dict[str, dict]:
        entries: dict[str, dict] = {}
        if self._manifest_path.exists():
            with self._manifest_path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    entries[rec["stage"]] = rec
        return entries

    def _execute(self, stage: str, sections: list[str], inputs: list[str],
                 outputs: list[str], fn) -> None:
        for name in inputs:
            if not (self.workdir / name).exists():
                raise StageError(stage, f"missing artifact: {name}")
        cfg_h = config_hash([self.cfg.get(s, {}) for s in sections])
        input_hashes = {name: file_hash(self.workdir / name) for name in inputs}
        prior = self._manifest().get(stage)
        outputs_exist = all((self.workdir / name).exists() for name in outputs)
        if (not self.force and prior and prior["config_hash"] == cfg_h
                and prior["input_hashes"] == input_hashes and outputs_exist):
            log.info("stage %s: inputs unchanged, skipping", stage)
            return
        t0 = time.time()
        fn()
        entry = {
            "stage": stage,
            "config_hash": cfg_h,
            "input_hashes": input_hashes,
            "outputs": outputs,
            "wall_time_s": round(time.time() - t0, 3),
        }
        with self._manifest_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self._cache.clear()

    # -- artifact loaders ----------------------------------------------

    def _dataset(self) -> corpus.Dataset:
        if "dataset" not in self._cache:
            self._cache["dataset"] = corpus.load_dataset(self.workdir / "dataset")
        return self._cache["dataset"]

    def _table(self, artifact: str):
        key = f"table:{artifact}"
        if key not in self._cache:
            self._cache[key] = load_embeddings(self.workdir / artifact, self._dataset())
        return self._cache[key]

    def _sids(self, artifact: str) -> rqkmeans.SidAssignment:
        key = f"sids:{artifact}"
        if key not in self._cache:
            _, self._cache[key] = rqkmeans.load_sids(self.workdir / artifact)
        return self._cache[key]

    def _vocab(self):
        if "vocab" not in self._cache:
            self._cache["vocab"] = load_vocab(self.workdir / "vocab.json")
        return self._cache["vocab"]

    def _fresh_model(self) -> TinyDecoder:
        m = self.cfg["model"]
        return TinyDecoder(self._vocab(), d_model=m["d_model"], n_layers=m["n_layers"],
                           n_heads=m["n_heads"], max_seq=m["max_seq"], seed=m["seed"])

    # -- stages ----------------------------------------------------------

    def stage_data(self) -> None:
        data_cfg = self.cfg["data"]

        def run() -> None:
            if "synth" in data_cfg:
                spec = corpus.SynthSpec(**data_cfg["synth"])
                ds = corpus.synthesize_dataset(spec)
            else:
                ds = corpus.load_checkins_tsv(data_cfg["tsv"])
            fractions = tuple(data_cfg.get("fractions", (0.8, 0.1, 0.1)))
            ds = corpus.temporal_split(ds, fractions)
            corpus.save_dataset(ds, self.workdir / "dataset")

        self._execute("data", ["data"], [], list(DATASET_FILES), run)

    def stage_embed(self) -> None:
        e = self.cfg["embed"]

        def run() -> None:
            if "external" in e:
                table = load_embeddings(e["external"], self._dataset())
            else:
                table = hash_embed(self._dataset(), dim=e["dim"], seed=e["seed"])
            save_embeddings(table, self.workdir / "embeddings_base.gemb")

        self._execute("embed", ["embed"], list(DATASET_FILES), ["embeddings_base.gemb"], run)

    def stage_pairs(self) -> None:
        def run() -> None:
            cfg = pairs.PairMiningConfig(**self.cfg["pairs"])
            mined = pairs.mine_pairs(self._dataset(), cfg)
            pairs.save_pairs(mined, self.workdir / "pairs.tsv")

        self._execute("pairs", ["pairs"], list(DATASET_FILES), ["pairs.tsv"], run)

    def stage_contrast(self) -> None:
        if not self.enabled("contrastive"):
            log.info("stage contrast disabled")
            return

        def run() -> None:
            section = {k: v for k, v in self.cfg["contrastive"].items() if k != "enabled"}
            cfg = contrastive.P2PTrainConfig(**section)
            mined = pairs.load_pairs(self.workdir / "pairs.tsv")
            refined, curve = contrastive.train_p2p(self._table("embeddings_base.gemb"), mined, cfg)
            save_embeddings(refined, self.workdir / "embeddings_refined.gemb")
            _write_curve(self.workdir / "contrast_loss.csv", curve)

        self._execute("contrast", ["contrastive"], ["embeddings_base.gemb", "pairs.tsv"],
                      ["embeddings_refined.gemb", "contrast_loss.csv"], run)

    def stage_tokenize(self) -> None:
        source = self.embeddings_artifact

        def run() -> None:
            section = {k: v for k, v in self.cfg["rq"].items() if k != "input"}
            cfg = rqkmeans.RqConfig(**section)
            table = self._table(source)
            codebooks, assignment = rqkmeans.rq_tokenize(table, cfg)
            rqkmeans.save_sids(codebooks, assignment, cfg, self.workdir / "sids.json")
            vocab = build_vocab(self._dataset(), tuple(cb.size for cb in codebooks),
                                n_dedup=assignment.n_dedup)
            save_vocab(vocab, self.workdir / "vocab.json")

        self._execute("tokenize", ["rq"], list(DATASET_FILES) + [source],
                      ["sids.json", "vocab.json"], run)

    def stage_em(self) -> None:
        if not self.enabled("em"):
            log.info("stage em disabled")
            return
        e = self.cfg["em"]

        def run() -> None:
            _, sids0 = rqkmeans.load_sids(self.workdir / "sids.json")
            cfg = emrefine.EmConfig(
                epochs=e.get("epochs", 4), lr=e.get("lr", 0.2), batch=e.get("batch", 32),
                seed=e["seed"], hitrate_max_examples=e.get("hitrate_max_examples", 200),
                hitrate_history_len=e.get("hitrate_history_len", 8),
            )
            model = self._fresh_model()
            refined, model, states = emrefine.em_refine(
                model, sids0, self._dataset(), n_iters=e.get("n_iters", 3),
                beam=e.get("beam", 20), cfg=cfg,
            )
            codebooks, _ = rqkmeans.load_sids(self.workdir / "sids.json")
            rq_cfg = rqkmeans.RqConfig(**{k: v for k, v in self.cfg["rq"].items() if k != "input"})
            rqkmeans.save_sids(codebooks, refined, rq_cfg, self.workdir / "sids_em.json")
            audit = self.workdir / "em_audit.jsonl"
            audit.unlink(missing_ok=True)
            emrefine.write_audit_log(states, audit)
            model.stage = "sft"
            save_checkpoint(model, self.workdir / "model_em.ckpt")

        self._execute("em", ["em", "model", "rq"],
                      list(DATASET_FILES) + ["sids.json", "vocab.json"],
                      ["sids_em.json", "em_audit.jsonl", "model_em.ckpt"], run)

    def stage_cpt(self) -> None:
        if not self.enabled("cpt"):
            log.info("stage cpt disabled")
            return
        c = self.cfg["cpt"]

        def run() -> None:
            model = self._fresh_model()
            examples = prompts.build_cpt_corpus(
                self._dataset(), self._sids(self.sids_artifact), self._vocab(),
                seed=c["seed"], max_len=model.max_seq,
            )
            model, curve = train(model, examples, epochs=c["epochs"], lr=c["lr"],
                                 batch=c["batch"], seed=c["seed"])
            model.stage = "cpt"
            save_checkpoint(model, self.workdir / "model_cpt.ckpt")
            _write_curve(self.workdir / "cpt_loss.csv", curve)

        self._execute("cpt", ["cpt", "model", "rq", "em"],
                      list(DATASET_FILES) + [self.sids_artifact, "vocab.json"],
                      ["model_cpt.ckpt", "cpt_loss.csv"], run)

    def stage_sft(self) -> None:
        s = self.cfg["sft"]
        inputs = list(DATASET_FILES) + [self.sids_artifact, "vocab.json"]
        if self.enabled("cpt"):
            inputs.append("model_cpt.ckpt")

        def run() -> None:
            if self.enabled("cpt"):
                model = load_checkpoint(self.workdir / "model_cpt.ckpt", self._vocab())
            else:
                model = self._fresh_model()
            sft_cfg = prompts.SftConfig(history_len=s.get("history_len", 32), epochs=s["epochs"],
                                        lr=s["lr"], batch=s["batch"], seed=s["seed"])
            examples = prompts.build_sft_dataset(self._dataset(), self._sids(self.sids_artifact),
                                                 self._vocab(), sft_cfg)
            model, curve = train(model, examples, epochs=sft_cfg.epochs, lr=sft_cfg.lr,
                                 batch=sft_cfg.batch, seed=sft_cfg.seed)
            model.stage = "sft"
            save_checkpoint(model, self.workdir / "model_sft.ckpt")
            _write_curve(self.workdir / "sft_loss.csv", curve)

        self._execute("sft", ["sft", "model", "rq", "em", "cpt"], inputs,
                      ["model_sft.ckpt", "sft_loss.csv"], run)

    def stage_predict(self) -> None:
        ev = self.cfg["eval"]

        def run() -> None:
            ds = self._dataset()
            sids = self._sids(self.sids_artifact)
            model = load_checkpoint(self.workdir / "model_sft.ckpt", self._vocab())
            trie = build_sid_trie(sids)
            history_len = self.cfg["sft"].get("history_len", 32)
            top_k = ev.get("top_k", 20)
            beam_width = ev.get("beam_width", max(30, top_k))
            prompt_list: list[list[int]] = []
            targets: list[str] = []
            for user in sorted(ds.trajectories):
                inters = ds.user_interactions(user)
                tags = ds.user_split_tags(user)
                for pos, inter in enumerate(inters):
                    if tags[pos] != "test":
                        continue
                    prompt = prompts.sft_prompt_ids(ds, sids, self._vocab(), user,
                                                    inters[:pos], inter, history_len)
                    prompt_list.append(clip_prompt(prompt, model, trie.levels))
                    targets.append(inter.poi_id)
            decoded = beam_search_many(model, prompt_list, beam_width=beam_width,
                                       k=beam_width, trie=trie)
            with (self.workdir / "predictions.jsonl").open("w", encoding="utf-8") as fh:
                for target, result in zip(targets, decoded):
                    ranked: list[str] = []
                    for sid, _ in result:
                        for poi_id in sids.reverse.get(sid, ()):
                            if poi_id not in ranked:
                                ranked.append(poi_id)
                    fh.write(json.dumps({"target": target, "ranked": ranked[:top_k]}) + "\n")

        self._execute("predict", ["eval", "sft", "model", "rq", "em"],
                      list(DATASET_FILES) + [self.sids_artifact, "vocab.json", "model_sft.ckpt"],
                      ["predictions.jsonl"], run)

    def stage_eval(self) -> None:
        ev = self.cfg["eval"]

        def run() -> None:
            preds = []
            with (self.workdir / "predictions.jsonl").open("r", encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    if rec["ranked"]:
                        preds.append(evaluation.RankedPrediction(rec["target"], tuple(rec["ranked"])))
            k_list = ev.get("k_list", [5, 10, 20])
            table = self._table(self.embeddings_artifact)
            sids = self._sids(self.sids_artifact)
            evaluation.export_embeddings(table, sids, self.workdir / "embeddings_export.tsv")
            report = evaluation.cohesion(sids, table, self._dataset(), seed=ev["seed"])
            metrics = {
                "recall": {str(k): evaluation.recall_at_k(preds, k) for k in k_list},
                "ndcg": {str(k): evaluation.ndcg_at_k(preds, k) for k in k_list},
                "cohesion": {
                    str(level + 1): {
                        "similarity": lv.similarity if lv.n_groups else None,
                        "distance_km": lv.distance_km if lv.n_groups else None,
                        "n_groups": lv.n_groups,
                    }
                    for level, lv in enumerate(report.levels)
                },
                "config_hash": config_hash(self.cfg),
            }
            (self.workdir / "metrics.json").write_text(
                json.dumps(metrics, sort_keys=True, indent=1), encoding="utf-8")

        self._execute("eval", ["eval", "rq", "em"],
                      list(DATASET_FILES) + [self.sids_artifact, self.embeddings_artifact,
                                             "predictions.jsonl"],
                      ["metrics.json", "embeddings_export.tsv"], run)

    def run(self, stages: list[str] | None = None) -> None:
        for stage in stages or self.STAGE_ORDER:
            getattr(self, f"stage_{stage}")()


def _write_curve(path: Path, curve: list[float]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, value in enumerate(curve):
            writer.writerow([epoch, f"{value:.9g}"])


# ---------------------------------------------------------------------------
# One-shot benchmark with ablations
# ---------------------------------------------------------------------------

_VARIANTS = {
    "full": {},
    "wo_cpt": {"cpt": {"enabled": False}},
    "wo_em": {"em": {"enabled": False}},
    "wo_contrast": {"contrastive": {"enabled": False}, "rq": {"input": "base"}},
}

_SHARED = {
    "wo_cpt": DATASET_FILES + ("embeddings_base.gemb", "pairs.tsv", "embeddings_refined.gemb",
                               "sids.json", "vocab.json", "sids_em.json", "em_audit.jsonl",
                               "model_em.ckpt"),
    "wo_em": DATASET_FILES + ("embeddings_base.gemb", "pairs.tsv", "embeddings_refined.gemb",
                              "sids.json", "vocab.json"),
    "wo_contrast": DATASET_FILES + ("embeddings_base.gemb", "pairs.tsv"),
}

_VARIANT_STAGES = {
    "wo_cpt": ("sft", "predict", "eval"),
    "wo_em": ("cpt", "sft", "predict", "eval"),
    "wo_contrast": ("tokenize", "em", "cpt", "sft", "predict", "eval"),
}


def _merge(base: dict, override: dict) -> dict:
    out = json.loads(json.dumps(base))
    for key, val in override.items():
        if isinstance(val, dict):
            out[key] = {**out.get(key, {}), **val}
        else:
            out[key] = val
    return out


def run_bench(config: dict, workdir: str | Path, force: bool = False) -> dict:
    """Full pipeline plus ablation runs sharing all seeds; emits
    bench_report.json with per-variant metrics and the popularity baseline.
    """
    workdir = Path(workdir)
    full = Pipeline(config, workdir / "full", force=force)
    full.run()
    report = {"full": json.loads((workdir / "full" / "metrics.json").read_text())}

    for variant, override in _VARIANTS.items():
        if variant == "full":
            continue
        vdir = workdir / variant
        vdir.mkdir(parents=True, exist_ok=True)
        for artifact in _SHARED[variant]:
            src = workdir / "full" / artifact
            dst = vdir / artifact
            dst.parent.mkdir(parents=True, exist_ok=True)
            if not dst.exists() or file_hash(src) != file_hash(dst):
                shutil.copyfile(src, dst)
        pipeline = Pipeline(_merge(config, override), vdir, force=force)
        pipeline.run(list(_VARIANT_STAGES[variant]))
        report[variant] = json.loads((vdir / "metrics.json").read_text())

    ds = corpus.load_dataset(workdir / "full" / "dataset")
    k_list = config["eval"].get("k_list", [5, 10, 20])
    report["popularity"] = {
        "recall": {str(k): evaluation.recall_at_k(evaluation.popularity_baseline(ds, k), k)
                   for k in k_list},
    }
    (workdir / "bench_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=1), encoding="utf-8")
    return report
