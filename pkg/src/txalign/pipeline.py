"""Stage implementations behind the CLI, with a content-hash manifest.

Layout of the artifact directory::

    manifest.json            one entry per completed stage
    data/ summarize/ generate/ embed_text/ pretrain/ align/
    export/ evaluate/ benchmark/ fom/ cache/
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import clients
from .alignment import AlignmentModel, fuse_embeddings, load_alignment, save_alignment, train_alignment
from .clients import (
    ChatClient,
    DiskCache,
    EmbeddingClient,
    MockEmbedder,
    MockGenerator,
    read_embeddings,
    read_jsonl,
    run_batch,
    write_embeddings,
    write_jsonl,
)
from .config import PipelineConfig
from .data import (
    HOLDOUT,
    TRAIN,
    UNLABELED,
    Dataset,
    apply_manifest,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_holdout,
    synthetic_mcc_names,
    write_manifest,
)
from .encoder import (
    EncoderConfig,
    GRUEncoder,
    dataset_amount_scale,
    load_encoder,
    pretrain_coles,
    save_encoder,
    write_loss_log,
)
from .evaluation import (
    EvalReport,
    BenchResult,
    Stage,
    compose_results,
    fom_report,
    holdout_score,
    kfold_evaluate,
    time_stages,
)
from .summarizer import (
    BehaviorProfile,
    agg_features,
    compute_profile,
    load_mcc_names,
    render_prompt,
    render_raw_prompt,
    write_mcc_names,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"

DEPENDENCIES = {
    "data": (),
    "summarize": ("data",),
    "generate": ("summarize",),
    "embed_text": ("generate",),
    "pretrain": ("data",),
    "align": ("pretrain", "embed_text"),
    "export": ("align", "summarize", "embed_text"),
    "evaluate": ("export", "data"),
    "benchmark": ("align", "data"),
    "fom": ("evaluate", "benchmark"),
}

# config sections each stage depends on
SECTIONS = {
    "data": ("data", "seed"),
    "summarize": ("summarizer",),
    "generate": ("generation", "summarizer"),
    "embed_text": ("embedding",),
    "pretrain": ("encoder", "pretrain", "seed"),
    "align": ("alignment", "data", "seed"),
    "export": ("alignment",),
    "evaluate": ("eval", "seed"),
    "benchmark": ("benchmark", "generation", "embedding", "summarizer"),
    "fom": (),
}

# produced by commands other than the stage's own name
PRODUCERS = {"data": "synth` or `ingest", "embed_text": "embed-text"}


class MissingUpstreamError(RuntimeError):
    def __init__(self, stage: str):
        super().__init__(f"missing upstream artifact: run `{PRODUCERS.get(stage, stage)}` first (stage '{stage}')")
        self.stage = stage


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def variant_tag(kind: str, head: str | None = None) -> str:
    return f"{kind}[{head}]" if head else kind


def _tag_file(tag: str) -> str:
    return tag.replace("[", "_").replace("]", "") + ".bin"


@dataclass
class Context:
    config: PipelineConfig
    root: Path
    counters: dict = field(default_factory=dict)
    http_factory: Callable | None = None  # for tests: returns an httpx.Client

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    def dir(self, stage: str) -> Path:
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- manifest ---------------------------------------------------------

    def manifest(self) -> dict:
        path = self.root / MANIFEST
        return json.loads(path.read_text()) if path.exists() else {"stages": {}}

    def _write_manifest(self, manifest: dict) -> None:
        (self.root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def entry_valid(self, stage: str) -> bool:
        entry = self.manifest()["stages"].get(stage)
        if not entry:
            return False
        for rel, digest in entry["outputs"].items():
            path = self.root / rel
            if not path.exists() or file_hash(path) != digest:
                return False
        return True

    def stage_hash(self, stage: str) -> str:
        stages = self.manifest()["stages"]
        upstream = {dep: stages[dep]["content_hash"] for dep in DEPENDENCIES[stage]}
        payload = json.dumps(
            {"config": self.config.section_hash(*SECTIONS[stage]) if SECTIONS[stage] else "", "upstream": upstream},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def record(self, stage: str, stage_hash: str, outputs: list[Path]) -> None:
        hashes = {str(p.relative_to(self.root)): file_hash(p) for p in sorted(outputs)}
        manifest = self.manifest()
        manifest["stages"][stage] = {
            "stage_hash": stage_hash,
            "outputs": hashes,
            "content_hash": hashlib.sha256(json.dumps(hashes, sort_keys=True).encode()).hexdigest(),
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        self._write_manifest(manifest)

    # -- shared loaders ----------------------------------------------------

    def dataset(self) -> Dataset:
        d = self.root / "data"
        return apply_manifest(load_dataset(d / "events.csv"), d / "dataset.json")

    def mcc_names(self) -> dict[int, str]:
        return load_mcc_names(self.root / "data" / "mcc_names.csv")

    def profiles(self) -> dict[str, BehaviorProfile]:
        rows = read_jsonl(self.root / "summarize" / "profiles.jsonl")
        return {r["client_id"]: BehaviorProfile.from_dict(r["profile"]) for r in rows}

    def text_embeddings(self) -> dict[str, np.ndarray]:
        ids, matrix = read_embeddings(self.root / "embed_text" / "text_embeddings.bin")
        return dict(zip(ids, matrix))

    def alignment_models(self) -> dict[str, AlignmentModel]:
        return {h: load_alignment(self.root / "align" / f"{h}.ckpt") for h in self.config.alignment.heads}


def run_stage(ctx: Context, stage: str, fn: Callable[[Context], list[Path]], force: bool = False) -> bool:
    """Run ``fn`` unless its recorded inputs are unchanged. Returns True if it ran."""
    for dep in DEPENDENCIES[stage]:
        if not ctx.entry_valid(dep):
            raise MissingUpstreamError(dep)
    digest = ctx.stage_hash(stage)
    entry = ctx.manifest()["stages"].get(stage)
    if not force and entry and entry["stage_hash"] == digest and ctx.entry_valid(stage):
        log.info("%s: up to date", stage)
        return False
    start = time.perf_counter()
    outputs = fn(ctx)
    ctx.record(stage, digest, outputs)
    log.info("%s: done in %.1fs", stage, time.perf_counter() - start)
    return True


# -- stages -------------------------------------------------------------------


def _write_data(ctx: Context, dataset: Dataset, names: dict[int, str]) -> list[Path]:
    cfg = ctx.config
    dataset = split_holdout(dataset, cfg.data.holdout_frac, cfg.seed)
    d = ctx.dir("data")
    save_dataset(dataset, d / "events.csv")
    write_manifest(dataset, d / "dataset.json")
    write_mcc_names(names, d / "mcc_names.csv")
    return [d / "events.csv", d / "dataset.json", d / "mcc_names.csv"]


def stage_synth(ctx: Context) -> list[Path]:
    cfg = ctx.config.data
    dataset = generate_synthetic(cfg.n_clients, ctx.config.seed, cfg.synthetic)
    return _write_data(ctx, dataset, synthetic_mcc_names(cfg.synthetic.n_mcc))


def stage_ingest(ctx: Context) -> list[Path]:
    cfg = ctx.config.data
    dataset = load_dataset(cfg.csv_path, cfg.schema)
    if cfg.mcc_names_path:
        names = load_mcc_names(cfg.mcc_names_path)
    else:
        names = {i: f"mcc_{i}" for i in range(dataset.vocab_sizes["mcc"])}
    return _write_data(ctx, dataset, names)


def stage_summarize(ctx: Context) -> list[Path]:
    cfg = ctx.config.summarizer
    dataset, names = ctx.dataset(), ctx.mcc_names()
    d = ctx.dir("summarize")
    profiles, prompts = [], []
    for s in dataset.sequences:
        profile = compute_profile(s, names)
        profiles.append({"client_id": s.client_id, "profile": profile.to_dict()})
        if cfg.prompt_format == "stats":
            prompt = render_prompt(profile, cfg.currency)
        else:
            prompt = render_raw_prompt(s, cfg.raw_max_events, names)
        prompts.append({"client_id": s.client_id, "prompt": prompt})
    write_jsonl(d / "profiles.jsonl", profiles)
    write_jsonl(d / "prompts.jsonl", prompts)
    agg = np.stack([agg_features(s, dataset.vocab_sizes).vector for s in dataset.sequences])
    write_embeddings(d / "agg.bin", [s.client_id for s in dataset.sequences], agg)
    return [d / "profiles.jsonl", d / "prompts.jsonl", d / "agg.bin", clients.index_path(d / "agg.bin")]


def _generator(ctx: Context):
    cfg = ctx.config.generation
    if cfg.mock:
        gen = MockGenerator(ctx.profiles(), cfg.mock_seed)
        return gen, f"mock-generator:{cfg.mock_seed}", 1
    http = ctx.http_factory() if ctx.http_factory else None
    gen = ChatClient(cfg.endpoint, http)
    return gen, f"{cfg.endpoint.base_url}|{cfg.endpoint.model}", cfg.endpoint.max_parallel


def stage_generate(ctx: Context) -> list[Path]:
    prompts = read_jsonl(ctx.root / "summarize" / "prompts.jsonl")
    gen, namespace, parallel = _generator(ctx)
    ctx.counters["generator"] = gen
    results = run_batch(
        [(r["client_id"], r["prompt"]) for r in prompts],
        lambda text, cid: gen.generate(text, cid),
        max_parallel=parallel,
        cache=DiskCache(ctx.root / "cache" / "generate"),
        namespace=namespace,
        encode=lambda desc: desc.text,
        decode=lambda cid, text: clients.Description(cid, text),
    )
    missing = len(prompts) - len(results)
    if missing:
        log.warning("generate: %d clients without a description are excluded", missing)
    d = ctx.dir("generate")
    write_jsonl(d / "descriptions.jsonl", [{"client_id": cid, "text": desc.text} for cid, desc in results.items()])
    return [d / "descriptions.jsonl"]


def stage_embed_text(ctx: Context) -> list[Path]:
    cfg = ctx.config.embedding
    rows = read_jsonl(ctx.root / "generate" / "descriptions.jsonl")
    if cfg.mock:
        emb = MockEmbedder(cfg.dim, cfg.mock_seed)
        namespace, parallel = f"mock-embedder:{cfg.dim}:{cfg.mock_seed}", 1
    else:
        emb = EmbeddingClient(cfg.endpoint, ctx.http_factory() if ctx.http_factory else None)
        namespace, parallel = f"{cfg.endpoint.base_url}|{cfg.endpoint.model}", cfg.endpoint.max_parallel
    ctx.counters["embedder"] = emb
    results = run_batch(
        [(r["client_id"], r["text"]) for r in rows],
        lambda text, cid: emb.embed(text, cid),
        max_parallel=parallel,
        cache=DiskCache(ctx.root / "cache" / "embed_text"),
        namespace=namespace,
        encode=lambda e: [float(x) for x in e.vector],
        decode=lambda cid, v: clients.TextEmbedding(cid, np.asarray(v)),
    )
    dims = {len(e.vector) for e in results.values()}
    if len(dims) > 1:
        raise clients.ConsistencyError(f"text embeddings have mixed dimensions {sorted(dims)}")
    d = ctx.dir("embed_text")
    ids = list(results)
    write_embeddings(d / "text_embeddings.bin", ids, np.stack([results[c].vector for c in ids]))
    return [d / "text_embeddings.bin", clients.index_path(d / "text_embeddings.bin")]


def _training_sequences(ctx: Context, dataset: Dataset, for_alignment: bool = False):
    tags = {TRAIN, UNLABELED}
    if for_alignment and not ctx.config.data.include_unlabeled_in_alignment:
        tags = {TRAIN}
    return [s for s in dataset.sequences if dataset.splits[s.client_id] in tags]


def stage_pretrain(ctx: Context) -> list[Path]:
    cfg = ctx.config
    dataset = ctx.dataset()
    enc_cfg = EncoderConfig(
        vocab_sizes=dict(dataset.vocab_sizes),
        d_emb=cfg.encoder.d_emb,
        hidden=cfg.encoder.hidden,
        d_out=cfg.encoder.d_out,
        pooling=cfg.encoder.pooling,
        amount_scale=dataset_amount_scale(dataset),
    )
    encoder, losses = pretrain_coles(_training_sequences(ctx, dataset), enc_cfg, cfg.pretrain.build(cfg.seed))
    d = ctx.dir("pretrain")
    save_encoder(d / "encoder.ckpt", encoder)
    write_loss_log(d / "loss.csv", losses)
    return [d / "encoder.ckpt", d / "loss.csv"]


def stage_align(ctx: Context) -> list[Path]:
    cfg = ctx.config
    dataset = ctx.dataset()
    encoder = load_encoder(ctx.root / "pretrain" / "encoder.ckpt")
    if not cfg.alignment.warm_start:
        encoder = GRUEncoder.create(encoder.config, cfg.seed)
    text = ctx.text_embeddings()
    seqs = _training_sequences(ctx, dataset, for_alignment=True)
    d = ctx.dir("align")
    outputs = []
    for head in cfg.alignment.heads:
        model, losses = train_alignment(seqs, text, encoder, cfg.alignment.build(head, cfg.seed))
        save_alignment(d / f"{head}.ckpt", model)
        write_loss_log(d / f"{head}_loss.csv", losses)
        outputs += [d / f"{head}.ckpt", d / f"{head}_loss.csv"]
    return outputs


def stage_export(ctx: Context) -> list[Path]:
    dataset = ctx.dataset()
    seqs = list(dataset.sequences)
    ids = [s.client_id for s in seqs]
    text = ctx.text_embeddings()
    d = ctx.dir("export")
    variants: dict[str, str] = {}

    def emit(tag: str, rows: list[str], matrix: np.ndarray):
        name = _tag_file(tag)
        write_embeddings(d / name, rows, matrix)
        variants[tag] = name

    agg_ids, agg = read_embeddings(ctx.root / "summarize" / "agg.bin")
    emit("agg", agg_ids, agg)
    coles = load_encoder(ctx.root / "pretrain" / "encoder.ckpt")
    emit("coles", ids, coles.embed(seqs))
    with_text = [s for s in seqs if s.client_id in text]
    T = np.stack([text[s.client_id] for s in with_text]) if with_text else None
    for head, model in ctx.alignment_models().items():
        emit(variant_tag("latte-s", head), ids, model.sequence_embeddings(seqs))
        if T is not None:
            fused = fuse_embeddings(model.sequence_embeddings(with_text), model.project_text(T), "full")
            emit(variant_tag("latte", head), [s.client_id for s in with_text], fused)
    (d / "variants.json").write_text(json.dumps(variants, indent=2, sort_keys=True) + "\n")
    outputs = [d / "variants.json"]
    for name in variants.values():
        outputs += [d / name, clients.index_path(d / name)]
    return outputs


def load_variants(ctx: Context) -> dict[str, tuple[list[str], np.ndarray]]:
    d = ctx.root / "export"
    variants = json.loads((d / "variants.json").read_text())
    return {tag: read_embeddings(d / name) for tag, name in variants.items()}


def evaluate_variants(ctx: Context) -> list[EvalReport]:
    cfg = ctx.config
    dataset = ctx.dataset()
    reports = []
    variants = load_variants(ctx)
    wanted = cfg.eval.variants or tuple(variants)
    unknown = sorted(set(wanted) - set(variants))
    if unknown:
        raise ValueError(f"eval.variants: not exported: {', '.join(unknown)}")
    for tag in wanted:
        ids, X = variants[tag]
        row = {cid: i for i, cid in enumerate(ids)}
        train = [s for s in dataset.with_split(TRAIN) if s.client_id in row]
        hold = [s for s in dataset.with_split(HOLDOUT) if s.client_id in row]
        Xtr = X[[row[s.client_id] for s in train]]
        ytr = np.array([s.label for s in train])
        report = kfold_evaluate(Xtr, ytr, cfg.eval.k, cfg.seed, tag, cfg.eval.task, cfg.eval.classifier)
        if hold and len(set(s.label for s in hold)) > 1:
            Xh = X[[row[s.client_id] for s in hold]]
            report.holdout = holdout_score(Xtr, ytr, Xh, np.array([s.label for s in hold]), cfg.eval.classifier)
        reports.append(report)
    return reports


def stage_evaluate(ctx: Context) -> list[Path]:
    reports = evaluate_variants(ctx)
    d = ctx.dir("evaluate")
    (d / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    with (d / "reports.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "task", "metric", "mean", "std", "holdout", "folds"])
        for r in reports:
            holdout = "" if r.holdout is None else f"{r.holdout:.6f}"
            folds = " ".join(f"{v:.6f}" for v in r.fold_values)
            writer.writerow([r.variant, r.task, r.metric, f"{r.mean:.6f}", f"{r.std:.6f}", holdout, folds])
    return [d / "reports.json", d / "reports.csv"]


def _text_clients(ctx: Context):
    """(profile, prompt, id) -> Description and (text, id) -> TextEmbedding, uncached."""
    gen, emb = ctx.config.generation, ctx.config.embedding
    if gen.mock:
        def describe(profile, prompt, cid):
            return clients.mock_generate(profile, gen.mock_seed, cid)
    else:
        chat = ChatClient(gen.endpoint, ctx.http_factory() if ctx.http_factory else None)

        def describe(profile, prompt, cid):
            return chat.generate(prompt, cid)
    if emb.mock:
        def embed(text, cid):
            return clients.mock_embed(text, emb.dim, emb.mock_seed, cid)
    else:
        embed = EmbeddingClient(emb.endpoint, ctx.http_factory() if ctx.http_factory else None).embed
    return describe, embed


def benchmark_results(ctx: Context) -> list[BenchResult]:
    cfg = ctx.config
    dataset = ctx.dataset()
    seqs = list(dataset.sequences)
    names = ctx.mcc_names()
    describe, embed = _text_clients(ctx)
    models = ctx.alignment_models()
    coles = load_encoder(ctx.root / "pretrain" / "encoder.ckpt")
    batch = cfg.benchmark.batch_size

    def text_stage(model: AlignmentModel, z_lookup: dict[str, np.ndarray]):
        def run(chunk):
            vecs = []
            for s in chunk:
                profile = compute_profile(s, names)
                desc = describe(profile, render_prompt(profile, cfg.summarizer.currency), s.client_id)
                vecs.append(embed(desc.text, s.client_id).vector)
            z_text = model.project_text(np.stack(vecs))
            return fuse_embeddings(np.stack([z_lookup[s.client_id] for s in chunk]), z_text, "full")
        return run

    stages = [
        Stage("agg", lambda chunk: [agg_features(s, dataset.vocab_sizes) for s in chunk]),
        Stage("encode:coles", lambda chunk: coles.embed(chunk, batch)),
    ]
    variants: dict[str, tuple[list[str], int]] = {
        "agg": (["agg"], 0),
        "coles": (["encode:coles"], coles.n_params),
    }
    for head, model in models.items():
        z = dict(zip([s.client_id for s in seqs], model.sequence_embeddings(seqs)))
        stages.append(Stage(f"encode:{head}", lambda chunk, m=model: m.sequence_embeddings(chunk)))
        stages.append(Stage(f"text:{head}", text_stage(model, z)))
        enc_params = model.encoder.n_params
        if head == "ortho" and model.config.export_block != "full":
            enc_params += model.head_params["proj_w"].size + model.head_params["proj_b"].size
        text_params = model.head_params["text_w"].size + model.head_params["text_b"].size
        variants[variant_tag("latte-s", head)] = ([f"encode:{head}"], enc_params)
        variants[variant_tag("latte", head)] = ([f"encode:{head}", f"text:{head}"], enc_params + text_params)
    timings = time_stages(stages, seqs, cfg.benchmark.n_samples, cfg.benchmark.warmup, batch)
    return compose_results(timings, variants, cfg.benchmark.n_samples)


def stage_benchmark(ctx: Context) -> list[Path]:
    results = benchmark_results(ctx)
    d = ctx.dir("benchmark")
    (d / "bench.json").write_text(json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    return [d / "bench.json"]


def stage_fom(ctx: Context) -> list[Path]:
    reports = [EvalReport(**r) for r in json.loads((ctx.root / "evaluate" / "reports.json").read_text())]
    bench = [BenchResult(**r) for r in json.loads((ctx.root / "benchmark" / "bench.json").read_text())]
    bench_tags = {b.variant for b in bench}
    reports = [r for r in reports if r.variant in bench_tags]
    d = ctx.dir("fom")
    csv_path, svg_path = fom_report(reports, bench, d / "fom.csv", title=f"Figure of merit ({ctx.config.eval.task})")
    return [csv_path, svg_path]


STAGES: dict[str, tuple[str, Callable[[Context], list[Path]]]] = {
    "synth": ("data", stage_synth),
    "ingest": ("data", stage_ingest),
    "summarize": ("summarize", stage_summarize),
    "generate": ("generate", stage_generate),
    "embed-text": ("embed_text", stage_embed_text),
    "pretrain": ("pretrain", stage_pretrain),
    "align": ("align", stage_align),
    "export": ("export", stage_export),
    "evaluate": ("evaluate", stage_evaluate),
    "benchmark": ("benchmark", stage_benchmark),
    "fom": ("fom", stage_fom),
}

PIPELINE = ("summarize", "generate", "embed-text", "pretrain", "align", "export", "evaluate", "benchmark", "fom")


def run_command(ctx: Context, command: str, force: bool = False) -> bool:
    stage, fn = STAGES[command]
    return run_stage(ctx, stage, fn, force)


def run_all(ctx: Context, force: bool = False) -> None:
    first = "synth" if ctx.config.data.source == "synthetic" else "ingest"
    for command in (first, *PIPELINE):
        run_command(ctx, command, force)
