"""Closed-set identification: gallery building, ranked retrieval, CMC, and
the protocol harnesses (P1/P2/P3 analogs, ten-fold resampling, ablation).

Scoring is squared Euclidean distance in the shared embedding space, with
ties broken by ascending identity id so reports are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from attrcenter.encoders import Encoder, assemble_sketch_input
from attrcenter.lattice import AttributeSchema
from attrcenter.synth import DatasetManifest, generate_dataset
from attrcenter.trainer import ImageStore, TrainConfig, TrainState, init_state, train


class EvalError(ValueError):
    pass


_ENCODE_CHUNK = 64


@dataclass
class GalleryIndex:
    """Photo embeddings for a set of mugshot identities."""

    ids: np.ndarray
    embeddings: np.ndarray
    combos: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.combos = np.asarray(self.combos)
        if self.ids.size != self.embeddings.shape[0]:
            raise EvalError("gallery ids and embeddings disagree in length")
        if len(set(self.ids.tolist())) != self.ids.size:
            raise EvalError("gallery ids must be unique")
        if not np.isfinite(self.embeddings).all():
            raise EvalError("gallery embeddings must be finite")

    def __len__(self) -> int:
        return int(self.ids.size)


def build_gallery(photo_encoder: Encoder, manifest: DatasetManifest,
                  rows: Optional[list] = None, store: Optional[ImageStore] = None) -> GalleryIndex:
    rows = manifest.rows if rows is None else rows
    store = store or ImageStore()
    if not rows:
        raise EvalError("cannot build an empty gallery")
    embs = []
    for start in range(0, len(rows), _ENCODE_CHUNK):
        chunk = rows[start:start + _ENCODE_CHUNK]
        batch = np.stack([store.get(manifest.photo_path(r)) for r in chunk]).astype(np.float32)
        embs.append(photo_encoder.encode(batch).data.astype(np.float64))
    return GalleryIndex(ids=np.asarray([r.identity for r in rows]),
                        embeddings=np.concatenate(embs, axis=0),
                        combos=np.asarray([r.combo for r in rows]))


def embed_probe(sketch_encoder: Encoder, sketch: np.ndarray, combo,
                use_attributes: bool = True) -> np.ndarray:
    stacked = assemble_sketch_input(sketch, combo, use_attributes=use_attributes).stacked()
    return sketch_encoder.encode(stacked[None].astype(np.float32)).data[0].astype(np.float64)


def rank_probe(gallery: GalleryIndex, probe_sketch: np.ndarray, combo,
               sketch_encoder: Encoder, use_attributes: bool = True):
    """Gallery ids sorted by squared distance to the probe embedding.

    Returns (ranked_ids, ranked_distances); equal distances order by id.
    """
    if len(gallery) == 0:
        raise EvalError("empty gallery")
    emb = embed_probe(sketch_encoder, probe_sketch, combo, use_attributes)
    return rank_embedding(gallery, emb)


def rank_embedding(gallery: GalleryIndex, emb: np.ndarray):
    diff = gallery.embeddings - emb[None, :]
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((gallery.ids, d2))
    return gallery.ids[order], d2[order]


@dataclass
class CmcResult:
    """Per-probe mate ranks plus the cumulative match curve they induce."""

    probe_ids: np.ndarray
    ranks: np.ndarray        # 1-based rank of each probe's true mate
    gallery_size: int

    @property
    def curve(self) -> np.ndarray:
        ks = np.arange(1, self.gallery_size + 1)
        return (self.ranks[None, :] <= ks[:, None]).mean(axis=1)

    def rank_k(self, k: int) -> float:
        if not 1 <= k <= self.gallery_size:
            raise EvalError(f"rank {k} outside gallery of {self.gallery_size}")
        return float((self.ranks <= k).mean())


def cmc(ranked_lists: list, true_ids, probe_ids=None, gallery_size: Optional[int] = None) -> CmcResult:
    """Closed-set CMC from per-probe ranked id lists; every mate must be present."""
    true_ids = np.asarray(true_ids)
    if len(ranked_lists) != true_ids.size:
        raise EvalError("one true id is needed per ranked list")
    ranks = np.zeros(true_ids.size, dtype=np.int64)
    for i, (ranked, true_id) in enumerate(zip(ranked_lists, true_ids)):
        ranked = np.asarray(ranked)
        hits = np.nonzero(ranked == true_id)[0]
        if hits.size == 0:
            raise EvalError(f"closed-set violation: id {true_id} absent from the gallery ranking")
        ranks[i] = hits[0] + 1
    size = gallery_size if gallery_size is not None else max(len(r) for r in ranked_lists)
    pid = np.asarray(probe_ids) if probe_ids is not None else true_ids
    return CmcResult(probe_ids=pid, ranks=ranks, gallery_size=size)


def evaluate_manifest(state: TrainState, gallery: GalleryIndex, probe_rows: list,
                      manifest: DatasetManifest, store: Optional[ImageStore] = None,
                      use_attributes: Optional[bool] = None,
                      attr_noise: float = 0.0,
                      noise_rng: Optional[np.random.Generator] = None) -> CmcResult:
    """Rank every probe sketch in ``probe_rows`` against the gallery.

    ``attr_noise`` flips each probe attribute category to a different state
    with that probability (eyewitness error model) before building planes.
    """
    store = store or ImageStore()
    schema = state.schema
    if use_attributes is None:
        use_attributes = state.config.use_attributes
    if attr_noise > 0.0 and noise_rng is None:
        raise EvalError("attr_noise needs a dedicated RNG for reproducibility")
    ranked_lists = []
    true_ids = []
    for row in probe_rows:
        combo = schema.decode(row.combo)
        if attr_noise > 0.0:
            states = list(combo.state_indices)
            for ci, cat in enumerate(schema.categories):
                if noise_rng.random() < attr_noise:
                    other = [s for s in range(cat.state_count) if s != states[ci]]
                    states[ci] = int(other[int(noise_rng.integers(len(other)))])
            combo = schema.combination(states)
        ranked, _ = rank_probe(gallery, store.get(manifest.sketch_path(row)), combo,
                               state.sketch_encoder, use_attributes=use_attributes)
        ranked_lists.append(ranked)
        true_ids.append(row.identity)
    return cmc(ranked_lists, true_ids, probe_ids=true_ids, gallery_size=len(gallery))


def top_k_contradiction_count(state: TrainState, gallery: GalleryIndex, probe_rows: list,
                              manifest: DatasetManifest, store: ImageStore,
                              k: int = 5, min_contradictions: int = 2,
                              use_attributes: bool = True) -> int:
    """How many top-k gallery entries disagree with the probe's combination in
    at least ``min_contradictions`` categories, summed over probes."""
    schema = state.schema
    digits = schema.digits_table()
    combo_of = {int(i): int(c) for i, c in zip(gallery.ids, gallery.combos)}
    total = 0
    for row in probe_rows:
        ranked, _ = rank_probe(gallery, store.get(manifest.sketch_path(row)),
                               schema.decode(row.combo), state.sketch_encoder,
                               use_attributes=use_attributes)
        pd = digits[row.combo]
        for gid in ranked[:k]:
            cc = int((digits[combo_of[int(gid)]] != pd).sum())
            if cc >= min_contradictions:
                total += 1
    return total


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

# e-PRIP-style split: 48 of 123 identities train, the rest probe/gallery
PAPER_TRAIN_FRACTION = 48.0 / 123.0


@dataclass
class FoldResult:
    fold: int
    cmc: CmcResult
    gallery_size: int


@dataclass
class EvalReport:
    """Per-fold CMC plus aggregate rank-k statistics."""

    protocol: str
    folds: list
    rank_ks: tuple = (1, 5, 10)

    def rank_k_stats(self, k: int):
        vals = np.asarray([f.cmc.rank_k(min(k, f.cmc.gallery_size)) for f in self.folds])
        return float(vals.mean()), float(vals.std())

    def summary_rows(self) -> list:
        rows = []
        for k in self.rank_ks:
            mean, std = self.rank_k_stats(k)
            rows.append((k, mean, std))
        return rows

    def write_ranks_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write("fold,probe_id,rank_of_mate\n")
            for fr in self.folds:
                for pid, rank in zip(fr.cmc.probe_ids, fr.cmc.ranks):
                    fh.write(f"{fr.fold},{pid},{rank}\n")

    def write_cmc_csv(self, path: Path, max_k: Optional[int] = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        size = min(f.cmc.gallery_size for f in self.folds)
        if max_k is not None:
            size = min(size, max_k)
        curves = np.stack([f.cmc.curve[:size] for f in self.folds])
        mean = curves.mean(axis=0)
        std = curves.std(axis=0)
        with open(path, "w") as fh:
            fh.write("k,accuracy,std\n")
            for i in range(size):
                fh.write(f"{i + 1},{mean[i]:.6f},{std[i]:.6f}\n")


def split_rows(rows: list, train_fraction: float, rng: np.random.Generator):
    ids = sorted({r.identity for r in rows})
    if len(ids) < 3:
        raise EvalError(f"need at least 3 identities to split, got {len(ids)}")
    n_train = int(round(train_fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    perm = rng.permutation(len(ids))
    train_ids = {ids[i] for i in perm[:n_train]}
    train_rows = [r for r in rows if r.identity in train_ids]
    test_rows = [r for r in rows if r.identity not in train_ids]
    return train_rows, test_rows


def paper_split_sizes(n_identities: int, train_fraction: float = PAPER_TRAIN_FRACTION):
    n_train = int(round(train_fraction * n_identities))
    return n_train, n_identities - n_train


def run_protocol(name: str, schema: AttributeSchema, work_dir: Path,
                 train_config: TrainConfig, n_identities: int = 200,
                 folds: int = 10, seed: int = 0,
                 train_fraction: float = PAPER_TRAIN_FRACTION,
                 gallery_extension: int = 10,
                 n_prototypes: int = 40, jitter: float = 0.10,
                 image_size: Optional[tuple] = None,
                 attr_noise: float = 0.0) -> EvalReport:
    """P1: plain split; P2: split with a distractor-extended gallery;
    P3: train on the line-sketch style, probe with the xDoG style on unseen
    identities. All report over ``folds`` random resamplings."""
    name = name.upper()
    if name not in ("P1", "P2", "P3"):
        raise EvalError(f"unknown protocol {name!r} (expected P1, P2, or P3)")
    work_dir = Path(work_dir)
    size = image_size or train_config.image_size
    store = ImageStore()

    main = generate_dataset(n_identities, schema, seed, work_dir / "main", size=size,
                            style="line", n_prototypes=n_prototypes, jitter=jitter,
                            split="main")
    distractors = None
    if name in ("P2", "P3"):
        n_extra = gallery_extension * max(1, n_identities - int(round(train_fraction * n_identities)))
        distractors = generate_dataset(n_extra, schema, seed, work_dir / "distractors",
                                       size=size, style="line", n_prototypes=10 * n_prototypes,
                                       jitter=jitter, split="distractor", id_base=1_000_000,
                                       prototype_offset=1_000)
    alt = None
    if name == "P3":
        alt = generate_dataset(n_identities, schema, seed, work_dir / "alt_style", size=size,
                               style="xdog", n_prototypes=n_prototypes, jitter=jitter,
                               split="alt", id_base=2_000_000)

    results = []
    for fold in range(folds):
        fold_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(fold,)))
        fold_cfg = _reseed(train_config, seed * 1000 + fold)
        if name == "P3":
            # train on every line-style identity, probe the unseen-style pool
            train_manifest = main
            test_manifest = alt
            test_rows = list(alt.rows)
        else:
            train_rows, test_rows = split_rows(main.rows, train_fraction, fold_rng)
            train_manifest = DatasetManifest(rows=train_rows, root=main.root, split="train")
            test_manifest = main
        state = train(train_manifest, fold_cfg, schema, store=store)

        gallery_rows = list(test_rows)
        gallery_manifest = test_manifest
        if name in ("P2", "P3"):
            gallery_rows, gallery = _extended_gallery(state, test_manifest, test_rows,
                                                      distractors, store)
        else:
            gallery = build_gallery(state.photo_encoder, gallery_manifest, gallery_rows, store)
        noise_rng = (np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(fold, 999)))
                     if attr_noise > 0 else None)
        result = evaluate_manifest(state, gallery, test_rows, test_manifest, store,
                                   attr_noise=attr_noise, noise_rng=noise_rng)
        results.append(FoldResult(fold=fold, cmc=result, gallery_size=len(gallery)))
    return EvalReport(protocol=name, folds=results)


def _extended_gallery(state: TrainState, test_manifest: DatasetManifest, test_rows: list,
                      distractors: DatasetManifest, store: ImageStore):
    base = build_gallery(state.photo_encoder, test_manifest, test_rows, store)
    extra = build_gallery(state.photo_encoder, distractors, store=store)
    merged = GalleryIndex(ids=np.concatenate([base.ids, extra.ids]),
                          embeddings=np.concatenate([base.embeddings, extra.embeddings]),
                          combos=np.concatenate([base.combos, extra.combos]))
    return list(test_rows), merged


def _reseed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace
    return replace(cfg, seed=seed)


# ---------------------------------------------------------------------------
# attribute ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationArm:
    rank1: float
    rank10: float
    rank10_extended: float
    top5_contradictions: int


@dataclass
class AblationSeedResult:
    seed: int
    attribute: AblationArm
    baseline: AblationArm


@dataclass
class AblationReport:
    results: list

    def mean_delta_rank1(self) -> float:
        return float(np.mean([r.attribute.rank1 - r.baseline.rank1 for r in self.results]))

    def write_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write("seed,arm,rank1,rank10,rank10_extended,top5_contradictions\n")
            for r in self.results:
                for arm_name in ("attribute", "baseline"):
                    arm = getattr(r, arm_name)
                    fh.write(f"{r.seed},{arm_name},{arm.rank1:.6f},{arm.rank10:.6f},"
                             f"{arm.rank10_extended:.6f},{arm.top5_contradictions}\n")
            fh.write(f"delta,rank1_mean,{self.mean_delta_rank1():.6f},,,\n")


def ablate_attributes(schema: AttributeSchema, work_dir: Path, train_config: TrainConfig,
                      seeds, n_identities: int = 200,
                      train_fraction: float = PAPER_TRAIN_FRACTION,
                      gallery_extension: int = 10, n_prototypes: int = 40,
                      jitter: float = 0.10) -> AblationReport:
    """Paired comparison: the full attribute-centered model against a
    contrastive-only twin whose attribute planes are zeroed. Both arms share
    the dataset, split, and training seed within each paired run."""
    from dataclasses import replace

    work_dir = Path(work_dir)
    results = []
    for seed in seeds:
        store = ImageStore()
        size = train_config.image_size
        data = generate_dataset(n_identities, schema, seed, work_dir / f"seed{seed}",
                                size=size, style="line", n_prototypes=n_prototypes,
                                jitter=jitter, split="main")
        n_extra = gallery_extension * max(1, n_identities - int(round(train_fraction * n_identities)))
        distractors = generate_dataset(n_extra, schema, seed, work_dir / f"seed{seed}_distr",
                                       size=size, style="line", n_prototypes=10 * n_prototypes,
                                       jitter=jitter, split="distractor", id_base=1_000_000,
                                       prototype_offset=1_000)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
        train_rows, test_rows = split_rows(data.rows, train_fraction, rng)
        train_manifest = DatasetManifest(rows=train_rows, root=data.root, split="train")

        arms = {}
        for arm_name in ("attribute", "baseline"):
            if arm_name == "attribute":
                cfg = replace(train_config, seed=seed, use_attributes=True)
            else:
                cfg = replace(train_config, seed=seed, use_attributes=False,
                              loss_weights=(0.0, 1.0, 0.0))
            state = train(train_manifest, cfg, schema, store=store)
            gallery = build_gallery(state.photo_encoder, data, test_rows, store)
            extra = build_gallery(state.photo_encoder, distractors, store=store)
            extended = GalleryIndex(ids=np.concatenate([gallery.ids, extra.ids]),
                                    embeddings=np.concatenate([gallery.embeddings, extra.embeddings]),
                                    combos=np.concatenate([gallery.combos, extra.combos]))
            base_cmc = evaluate_manifest(state, gallery, test_rows, data, store)
            ext_cmc = evaluate_manifest(state, extended, test_rows, data, store)
            contra = top_k_contradiction_count(state, gallery, test_rows, data, store,
                                               use_attributes=cfg.use_attributes)
            arms[arm_name] = AblationArm(
                rank1=base_cmc.rank_k(1),
                rank10=base_cmc.rank_k(min(10, base_cmc.gallery_size)),
                rank10_extended=ext_cmc.rank_k(min(10, ext_cmc.gallery_size)),
                top5_contradictions=contra)
        results.append(AblationSeedResult(seed=seed, attribute=arms["attribute"],
                                          baseline=arms["baseline"]))
    return AblationReport(results=results)
