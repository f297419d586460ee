"""End-to-end runs: synthetic corpora, knowledge generation and encoding,
joint adaptor+backbone training, augmented-vector precompute, and the three
serving paths (full adaptor, detached/prestored, base).

Artifacts live under ``workdir/<config-hash>/`` and every stage is
idempotent: existing outputs for the same resolved config are reused, never
regenerated. Reports are split into a deterministic ``report.json`` (stable
bytes for identical config+seed) and a ``timings.json`` holding wall-clock
measurements, which are inherently run-dependent.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import backbone as bb
from . import clustering as cl
from . import corpus as cp
from . import hein as hx
from . import knowledge as kn
from . import prompting as pr
from . import tensor as T
from .errors import ConfigError, PipelineError
from .ioutil import crc64

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

ENCODER_PROFILES = {"small": 768, "large": 4096}


@dataclass
class RunSection:
    mode: str = "reki_i"              # base | reki_i | reki_c
    backbone: str = "din"             # din | mlp
    adaptor: str = "hein"             # hein | moe | mlp
    ablation: str = "both"            # none | user | item | both
    seed: int = 0
    epochs: int = 8
    batch_size: int = 256
    patience: int = 3
    learning_rates: tuple[float, ...] = (1e-3,)


@dataclass
class DataSection:
    workdir: str = "reki_out"
    interactions: str = ""            # empty: use the synthetic corpus
    items: str = ""
    users: str = ""
    scenario: str = "movie"
    positive_threshold: int = 4
    train_fraction: float = 0.9
    max_history: int = 30
    min_interactions: int = 5


@dataclass
class SynthSection:
    users: int = 2000
    items: int = 500
    genres: int = 8
    interactions: int = 60000
    noise: float = 0.2
    base_rate_range: tuple[float, float] = (0.3, 0.7)


@dataclass
class KnowledgeSection:
    encoder_profile: str = "custom"   # small (768) | large (4096) | custom
    encoder_dim: int = 64
    aug_dim: int = 32
    n_shared: int = 2
    n_user: int = 2
    n_item: int = 2
    expert_hidden: tuple[int, ...] = (128, 32)
    prompt_history: int = 20
    aggregation: str = "mean"


@dataclass
class LlmSection:
    use_mock: bool = True
    mock_target_tokens: int = 550
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "REKI_LLM_API_KEY"
    parallel: int = 4


@dataclass
class ClusterSection:
    item_leaf_capacity: int = 80
    user_leaf_capacity: int = 100
    representation_d: int = 15
    pretrain_epochs: int = 1
    embedding_dim: int = 32


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    knowledge: KnowledgeSection = field(default_factory=KnowledgeSection)
    llm: LlmSection = field(default_factory=LlmSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)

    def __post_init__(self):
        if self.run.mode not in ("base", "reki_i", "reki_c"):
            raise ConfigError(f"unknown mode: {self.run.mode!r}")
        if self.run.ablation not in ("none", "user", "item", "both"):
            raise ConfigError(f"unknown ablation: {self.run.ablation!r}")
        if self.run.mode != "base" and self.run.ablation == "none":
            # ablating all knowledge is exactly the base arm
            self.run.mode = "base"
        if self.knowledge.encoder_profile in ENCODER_PROFILES:
            self.knowledge.encoder_dim = ENCODER_PROFILES[self.knowledge.encoder_profile]
        if self.knowledge.aug_dim >= self.knowledge.encoder_dim:
            raise ConfigError("augmented dim must be below the encoder dim")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.blake2b(canonical.encode(), digest_size=8).hexdigest()

    def rundir(self) -> Path:
        d = Path(self.data.workdir) / self.config_hash()
        d.mkdir(parents=True, exist_ok=True)
        return d

    def aug_slots(self) -> tuple[str, ...]:
        if self.run.mode == "base":
            return ()
        slots: list[str] = []
        if self.run.ablation in ("user", "both"):
            slots.append("user")
        if self.run.ablation in ("item", "both"):
            slots.append("item")
        if self.run.mode == "reki_c":
            if "user" in slots:
                slots.append("user_history")
            if "item" in slots:
                slots.append("item_desc")
        return tuple(slots)


_SECTION_TYPES = {
    "run": RunSection, "data": DataSection, "synth": SynthSection,
    "knowledge": KnowledgeSection, "llm": LlmSection, "cluster": ClusterSection,
}


def _coerce(current, raw):
    if isinstance(current, tuple):
        value = json.loads(raw) if isinstance(raw, str) else raw
        return tuple(value)
    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        return str(raw).lower() in ("1", "true", "yes")
    return type(current)(raw)


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Build a RunConfig from an optional JSON/TOML file plus dotted-key
    overrides like ``run.epochs=4``; unknown keys are rejected."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        if path.suffix in (".toml", ".tml"):
            import tomli

            data = tomli.loads(text)
        else:
            data = json.loads(text)
    config = RunConfig()
    for section_name, section_data in data.items():
        if section_name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section: {section_name!r}")
        section = getattr(config, section_name)
        for key, value in section_data.items():
            if not hasattr(section, key):
                raise ConfigError(f"unknown config key: {section_name}.{key}")
            setattr(section, key, _coerce(getattr(section, key), value))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in _SECTION_TYPES:
            raise ConfigError(f"override key must be section.key, got {dotted!r}")
        section = getattr(config, parts[0])
        if not hasattr(section, parts[1]):
            raise ConfigError(f"unknown config key: {dotted}")
        setattr(section, parts[1], _coerce(getattr(section, parts[1]), raw))
    config.__post_init__()
    return config


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def synth_dataset(spec: SynthSection, seed: int, out_dir) -> dict:
    """Write a planted-signal corpus: every user carries a latent per-genre
    affinity; a click happens when the target item's genre scores above zero
    under that affinity, softened by the noise temperature.

    Item titles/categories embed the genre token, so generated knowledge
    texts carry the planted signal. Returns measured stats.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    genre_of = np.arange(spec.items) % spec.genres
    affinity = rng.normal(size=(spec.users, spec.genres))
    per_user = spec.interactions // spec.users
    extra = spec.interactions - per_user * spec.users

    def item_title(k: int) -> str:
        return f"Item {k:04d} Genre{genre_of[k]}"

    positives = 0
    total = 0
    with open(out_dir / "interactions.csv", "w", encoding="utf-8") as fh:
        fh.write("user_id,item_id,rating,timestamp\n")
        for u in range(spec.users):
            count = per_user + (1 if u < extra else 0)
            chosen = rng.choice(spec.items, size=min(count, spec.items), replace=False)
            for slot, k in enumerate(chosen):
                z = affinity[u, genre_of[k]]
                if spec.noise <= 0:
                    label = 1 if z > 0 else 0
                else:
                    p = 1.0 / (1.0 + np.exp(-z / spec.noise))
                    label = 1 if rng.uniform() < p else 0
                if label:
                    rating = 4 + int(rng.uniform() < 0.5)
                else:
                    rating = 1 + int(rng.uniform() * 3)
                fh.write(f"u{u:05d},i{k:04d},{rating},{u * 10000 + slot}\n")
                positives += label
                total += 1
    with open(out_dir / "items.csv", "w", encoding="utf-8") as fh:
        fh.write("item_id,title,category,attrs\n")
        for k in range(spec.items):
            fh.write(f"i{k:04d},{item_title(k)},Genre{genre_of[k]},genre=Genre{genre_of[k]}\n")
    with open(out_dir / "users.csv", "w", encoding="utf-8") as fh:
        fh.write("user_id,segment\n")
        for u in range(spec.users):
            fh.write(f"u{u:05d},s{int(rng.integers(4))}\n")
    stats = {"interactions": total, "base_rate": positives / total,
             "users": spec.users, "items": spec.items}
    (out_dir / "synth_stats.json").write_text(json.dumps(stats, sort_keys=True))
    return stats


# ---------------------------------------------------------------------------
# corpus assembly
# ---------------------------------------------------------------------------

@dataclass
class CorpusArtifacts:
    bundle: cp.TableBundle
    vocab: cp.FeatureVocab
    schema: bb.FeatureSchema
    train_samples: list[cp.Sample]
    test_samples: list[cp.Sample]
    histories: dict[str, list[str]]          # full chronological item keys per user
    labeled_histories: dict[str, list[tuple[str, int]]]  # (title, label) per user
    user_ids: list[str]
    item_ids: list[str]


def corpus_paths(config: RunConfig) -> tuple[Path, Path, Path | None]:
    if config.data.interactions:
        users = Path(config.data.users) if config.data.users else None
        return Path(config.data.interactions), Path(config.data.items), users
    synth_dir = config.rundir() / "corpus"
    marker = synth_dir / "synth_stats.json"
    if not marker.exists():
        synth_dataset(config.synth, config.run.seed, synth_dir)
    return synth_dir / "interactions.csv", synth_dir / "items.csv", synth_dir / "users.csv"


def item_description(info: cp.ItemInfo | None, item_id: str) -> str:
    if info is None:
        return item_id
    return f"{info.title}, {info.category}"


def load_corpus(config: RunConfig) -> CorpusArtifacts:
    interactions, items, users = corpus_paths(config)
    bundle = cp.load_tables(interactions, items, users)
    records = bundle.interactions
    if config.data.min_interactions > 1:
        records = cp.filter_min_interactions(records, config.data.min_interactions)
    records = cp.binarize(records, config.data.positive_threshold)
    split = cp.split_by_user(records, config.data.train_fraction, config.run.seed)
    vocab = cp.FeatureVocab.build(records, bundle.items, bundle.users,
                                  bundle.user_profile_fields)
    schema = bb.FeatureSchema.from_vocab(vocab, bundle.user_profile_fields,
                                         embedding_dim=config.cluster.embedding_dim,
                                         history_cap=config.data.max_history)
    make = lambda recs: cp.build_samples(recs, bundle.items, bundle.users,
                                         bundle.user_profile_fields, vocab,
                                         max_history=config.data.max_history)
    histories = cp.user_histories(records)
    labeled: dict[str, list[tuple[str, int]]] = {}
    for r in sorted(records, key=lambda r: (r.user_id, r.timestamp)):
        title = bundle.items[r.item_id].title if r.item_id in bundle.items else r.item_id
        labeled.setdefault(r.user_id, []).append((title, r.label))
    user_ids = sorted({r.user_id for r in records})
    item_ids = sorted({r.item_id for r in records} | set(bundle.items))
    return CorpusArtifacts(bundle, vocab, schema, make(split.train), make(split.test),
                           histories, labeled, user_ids, item_ids)


# ---------------------------------------------------------------------------
# knowledge stages
# ---------------------------------------------------------------------------

def resolve_factors(config: RunConfig, client: pr.LLMClient | None = None) -> pr.FactorSet:
    path = config.rundir() / "factors.json"
    if path.exists():
        return pr.FactorSet.from_json(path.read_text(encoding="utf-8"))
    overrides = pr.EXPERT_FACTORS.get(config.data.scenario)
    factors = pr.elicit_factors(config.data.scenario, client, overrides)
    path.write_text(factors.to_json(), encoding="utf-8")
    return factors


def make_client(config: RunConfig) -> pr.LLMClient:
    if config.llm.use_mock:
        return pr.MockLLM(seed=config.run.seed, target_tokens=config.llm.mock_target_tokens)
    if not config.llm.endpoint or not config.llm.model:
        raise ConfigError("remote client needs llm.endpoint and llm.model")
    return pr.RemoteChatClient(config.llm.endpoint, config.llm.model,
                               api_key_env=config.llm.api_key_env)


def profile_text(bundle: cp.TableBundle, user_id: str) -> str:
    profile = bundle.users.get(user_id)
    if not profile:
        return f"user {user_id}"
    return ", ".join(f"{k} {v}" for k, v in profile.items())


def individual_prompts(arts: CorpusArtifacts, factors: pr.FactorSet,
                       config: RunConfig) -> tuple[list[pr.PromptText], list[str]]:
    """User and item prompts for every entity; users without history are
    skipped (they fall back to default vectors downstream)."""
    prompts: list[pr.PromptText] = []
    skipped: list[str] = []
    for user in arts.user_ids:
        history = arts.labeled_histories.get(user, [])
        if not history:
            skipped.append(user)
            continue
        prompts.append(pr.build_user_prompt(profile_text(arts.bundle, user), history,
                                            factors, key=user,
                                            max_history=config.knowledge.prompt_history))
    for item in arts.item_ids:
        info = arts.bundle.items.get(item)
        prompts.append(pr.build_item_prompt(item_description(info, item), factors, key=item))
    return prompts, skipped


@dataclass
class ClusterArtifacts:
    item_assignment: dict[str, str]
    user_assignment: dict[str, str]
    item_clusters: list[cl.Cluster]
    user_clusters: list[cl.Cluster]


def pretrain_entity_embeddings(arts: CorpusArtifacts, config: RunConfig
                               ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Short base-backbone run whose tables provide item vectors
    (item emb ++ category emb) and user profile vectors (profile field embs)."""
    params = bb.init_backbone("mlp", arts.schema, aug_slots=(), aug_dim=0,
                              seed=config.run.seed, out_hidden=(32,))
    _train_params(params, None, arts, {}, config, epochs=config.cluster.pretrain_epochs,
                  lr=1e-3, eval_each_epoch=False)
    item_table = params.tables["item_id"].data
    cat_table = params.tables["category"].data
    item_vecs: dict[str, np.ndarray] = {}
    for item in arts.item_ids:
        iid = arts.vocab.encode("item_id", item)
        info = arts.bundle.items.get(item)
        cid = arts.vocab.encode("category", info.category if info else "")
        item_vecs[item] = np.concatenate([item_table[iid], cat_table[cid]])
    profile_vecs: dict[str, np.ndarray] = {}
    for user in arts.user_ids:
        profile = arts.bundle.users.get(user)
        if not profile:
            continue
        parts = [params.tables[f].data[arts.vocab.encode(f, profile.get(f, ""))]
                 for f in arts.bundle.user_profile_fields]
        if parts:
            profile_vecs[user] = np.concatenate(parts)
    return item_vecs, profile_vecs


def build_clusters(arts: CorpusArtifacts, config: RunConfig) -> ClusterArtifacts:
    item_vecs, profile_vecs = pretrain_entity_embeddings(arts, config)
    seed = config.run.seed

    item_matrix = np.stack([item_vecs[i] for i in arts.item_ids])
    tree = cl.ClusterTree(dim=item_matrix.shape[1],
                          gamma=cl.estimate_gamma(item_matrix, seed),
                          leaf_capacity=config.cluster.item_leaf_capacity, seed=seed)
    for item, vec in zip(arts.item_ids, item_matrix):
        tree.insert(vec, item)
    item_clusters = cl.extract_clusters(tree, config.cluster.item_leaf_capacity, kind="item")

    user_vec_map = cl.embed_users(
        {u: arts.histories.get(u, []) for u in arts.user_ids}, item_vecs, profile_vecs)
    user_matrix = np.stack([user_vec_map[u] for u in arts.user_ids])
    utree = cl.ClusterTree(dim=user_matrix.shape[1],
                           gamma=cl.estimate_gamma(user_matrix, seed + 1),
                           leaf_capacity=config.cluster.user_leaf_capacity, seed=seed + 1)
    for user, vec in zip(arts.user_ids, user_matrix):
        utree.insert(vec, user)
    raw_user_clusters = cl.extract_clusters(utree, config.cluster.user_leaf_capacity,
                                            kind="user")
    user_clusters = []
    for c in raw_user_clusters:
        reps = cl.represent_user_cluster(c, arts.histories, config.cluster.representation_d)
        user_clusters.append(dataclasses.replace(c, representation_items=tuple(reps)))

    item_assignment = {i: c.cluster_id for c in item_clusters for i in c.member_ids}
    user_assignment = {u: c.cluster_id for c in user_clusters for u in c.member_ids}
    return ClusterArtifacts(item_assignment, user_assignment, item_clusters, user_clusters)


def write_cluster_artifacts(cluster_arts: ClusterArtifacts, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "assignments.csv", "w", encoding="utf-8") as fh:
        fh.write("entity_id,cluster_id\n")
        for cluster_list in (cluster_arts.item_clusters, cluster_arts.user_clusters):
            for c in cluster_list:
                for member in c.member_ids:
                    fh.write(f"{member},{c.cluster_id}\n")
    with open(out_dir / "clusters.jsonl", "w", encoding="utf-8") as fh:
        for c in (*cluster_arts.item_clusters, *cluster_arts.user_clusters):
            fh.write(json.dumps({
                "cluster_id": c.cluster_id, "kind": c.kind,
                "members": list(c.member_ids),
                "representation_items": list(c.representation_items),
            }) + "\n")


def collective_prompts(arts: CorpusArtifacts, cluster_arts: ClusterArtifacts,
                       factors: pr.FactorSet) -> list[pr.PromptText]:
    """One set prompt per cluster; degenerate singleton clusters fall back to
    a single-description prompt under the cluster's key kind."""
    prompts: list[pr.PromptText] = []

    def title_of(item: str) -> str:
        info = arts.bundle.items.get(item)
        return info.title if info else item

    for c in cluster_arts.item_clusters:
        titles = [title_of(i) for i in c.member_ids]
        if len(titles) >= 2:
            prompt = pr.build_set_prompt(titles, factors, key=c.cluster_id,
                                         key_kind="item_cluster",
                                         max_items=max(80, len(titles)))
        else:
            base = pr.build_item_prompt(titles[0], factors, key=c.cluster_id)
            prompt = dataclasses.replace(base, key_kind="item_cluster")
        prompts.append(prompt)
    for c in cluster_arts.user_clusters:
        titles = [title_of(i) for i in c.representation_items]
        if len(titles) >= 2:
            prompt = pr.build_set_prompt(titles, factors, key=c.cluster_id,
                                         key_kind="user_cluster",
                                         max_items=max(80, len(titles)))
        else:
            description = titles[0] if titles else f"cluster {c.cluster_id}"
            base = pr.build_item_prompt(description, factors, key=c.cluster_id)
            prompt = dataclasses.replace(base, key_kind="user_cluster")
        prompts.append(prompt)
    return prompts


def account_calls(mode: str, n_users: int, n_items: int,
                  n_user_clusters: int = 0, n_item_clusters: int = 0,
                  cache_hits: int = 0) -> int:
    """Expected LLM call count for a cold (or partially warm) cache."""
    if mode == "reki_i":
        return n_users + n_items - cache_hits
    if mode == "reki_c":
        return n_user_clusters + n_item_clusters - cache_hits
    if mode == "base":
        return 0
    raise ConfigError(f"unknown mode: {mode!r}")


@dataclass
class KnowledgeStageResult:
    call_count: int
    cache_hits: int
    failures: int
    texts: int
    skipped_users: int


def run_knowledge_stage(arts: CorpusArtifacts, config: RunConfig,
                        cluster_arts: ClusterArtifacts | None = None,
                        client: pr.LLMClient | None = None) -> KnowledgeStageResult:
    factors = resolve_factors(config, client)
    client = client or make_client(config)
    rundir = config.rundir()
    skipped: list[str] = []
    if config.run.mode == "reki_c":
        if cluster_arts is None:
            raise PipelineError("collective mode needs cluster artifacts; run the cluster stage")
        prompts = collective_prompts(arts, cluster_arts, factors)
    else:
        prompts, skipped = individual_prompts(arts, factors, config)
    with pr.KnowledgeCache(rundir / "knowledge.jsonl") as cache:
        result = pr.generate_knowledge(prompts, client, cache,
                                       parallel=config.llm.parallel, backoff=0.05)
    return KnowledgeStageResult(result.call_count, result.cache_hits,
                                len(result.failures), len(result.texts), len(skipped))


# ---------------------------------------------------------------------------
# encoding stage
# ---------------------------------------------------------------------------

def make_encoder(config: RunConfig) -> kn.TextEncoder:
    return kn.MockTextEncoder(config.knowledge.encoder_dim, seed=config.run.seed)


def run_encode_stage(arts: CorpusArtifacts, config: RunConfig,
                     cluster_arts: ClusterArtifacts | None = None,
                     encoder: kn.TextEncoder | None = None) -> Path:
    """Encode every cached knowledge text (and, in collective mode, the raw
    per-entity history/description texts) into the representation store."""
    rundir = config.rundir()
    store_path = rundir / "repr.vec"
    if store_path.exists():
        return store_path
    encoder = encoder or make_encoder(config)
    mode = config.knowledge.aggregation
    cache = pr.KnowledgeCache(rundir / "knowledge.jsonl")
    try:
        if len(cache) == 0:
            raise PipelineError("knowledge cache is empty; run the knowledge stage first")
        store = kn.VectorStore.create(store_path, config.knowledge.encoder_dim)
        for entry in sorted(cache._entries.values(), key=lambda e: (e.key_kind, e.key)):
            rep = kn.represent(entry.text, entry.key_kind, entry.key, encoder, mode)
            store.put(rep.key, rep.vector, rep.key_kind)
        if config.run.mode == "reki_c":
            for user in arts.user_ids:
                titles = [t for t, _ in arts.labeled_histories.get(user, [])]
                recent = titles[-config.knowledge.prompt_history:]
                if not recent:
                    continue
                rep = kn.represent(" ".join(recent), "user_history", user, encoder, mode)
                store.put(rep.key, rep.vector, rep.key_kind)
            for item in arts.item_ids:
                info = arts.bundle.items.get(item)
                rep = kn.represent(item_description(info, item), "item_desc", item,
                                   encoder, mode)
                store.put(rep.key, rep.vector, rep.key_kind)
        kn.compute_defaults(store)
        store.close()
    except Exception:
        cache.close()
        if store_path.exists():
            store_path.unlink()
        raise
    cache.close()
    return store_path


# ---------------------------------------------------------------------------
# vector assembly for training & serving
# ---------------------------------------------------------------------------

def load_assignments(path: Path) -> tuple[dict[str, str], dict[str, str]]:
    items: dict[str, str] = {}
    users: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            entity, cluster_id = line.rstrip("\n").split(",")
            (items if cluster_id.startswith("item_") else users)[entity] = cluster_id
    return items, users


def slot_key(slot: str, sample: cp.Sample, assignment: ClusterArtifacts | None,
             mode: str) -> tuple[str, str]:
    """(kind, key) a sample uses for one augmented slot."""
    if slot == "user":
        if mode == "reki_c":
            cluster = assignment.user_assignment.get(sample.user_id, "")
            return "user_cluster", cluster
        return "user", sample.user_id
    if slot == "item":
        if mode == "reki_c":
            cluster = assignment.item_assignment.get(sample.target_item_key, "")
            return "item_cluster", cluster
        return "item", sample.target_item_key
    if slot == "user_history":
        return "user_history", sample.user_id
    if slot == "item_desc":
        return "item_desc", sample.target_item_key
    raise PipelineError(f"unknown augmented slot: {slot!r}")


def gather_representations(samples: Sequence[cp.Sample], slots: Sequence[str],
                           store: kn.VectorStore, assignment: ClusterArtifacts | None,
                           mode: str) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    """Per-slot (n, m) matrices; absent keys take the per-kind default vector
    and are counted."""
    matrices: dict[str, np.ndarray] = {}
    misses: dict[str, int] = {}
    for slot in slots:
        rows = np.empty((len(samples), store.dim))
        miss = 0
        for i, sample in enumerate(samples):
            kind, key = slot_key(slot, sample, assignment, mode)
            vec = store.get(key, kind) if key else None
            if vec is None:
                vec = kn.default_vector(store, kind, store.dim)
                miss += 1
            rows[i] = vec.astype(np.float64)
        matrices[slot] = rows
        misses[slot] = miss
    return matrices, misses


def slot_side(slot: str) -> str:
    return "user" if slot in ("user", "user_history") else "item"


def batch_slice(batch: bb.EncodedBatch, idx: np.ndarray) -> bb.EncodedBatch:
    return bb.EncodedBatch(
        user_ids={k: v[idx] for k, v in batch.user_ids.items()},
        hist_item=batch.hist_item[idx], hist_cat=batch.hist_cat[idx],
        hist_label=batch.hist_label[idx], hist_mask=batch.hist_mask[idx],
        target_item=batch.target_item[idx], target_cat=batch.target_cat[idx],
        labels=batch.labels[idx],
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    auc: float
    logloss: float


@dataclass
class RunReport:
    mode: str
    config_hash: str
    epochs: list[EpochMetrics]
    best_epoch: int
    final_auc: float
    final_logloss: float
    llm_call_count: int = 0
    default_misses: dict[str, int] = field(default_factory=dict)
    n_train: int = 0
    n_test: int = 0

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        return json.dumps(payload, sort_keys=True, indent=2)


def _adaptor_outputs(adaptor: hx.HeinParams | None, slots: Sequence[str],
                     matrices: Mapping[str, np.ndarray], idx: np.ndarray | None):
    if adaptor is None or not slots:
        return {}
    out = {}
    for slot in slots:
        rows = matrices[slot] if idx is None else matrices[slot][idx]
        out[slot] = hx.forward_side(T.const(rows), slot_side(slot), adaptor)
    return out


def _evaluate(params: bb.BackboneParams, adaptor, slots, encoded, matrices,
              batch_size) -> tuple[float, float]:
    n = encoded.size
    scores = np.empty(n)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        aug = _adaptor_outputs(adaptor, slots, matrices, idx)
        probs = bb.forward_batch(batch_slice(encoded, idx), aug, params)
        scores[idx] = probs.data[:, 0]
    return bb.auc(scores, encoded.labels[:, 0]), bb.logloss(scores, encoded.labels[:, 0])


def _train_params(params: bb.BackboneParams, adaptor, arts: CorpusArtifacts,
                  matrices_by_split, config: RunConfig, epochs: int, lr: float,
                  eval_each_epoch: bool = True, patience: int | None = None,
                  timings: dict | None = None) -> list[EpochMetrics]:
    """Adam over backbone (+adaptor) params; evaluation on the test split per
    epoch with early stopping on AUC; params end at the best epoch."""
    slots = params.aug_slots
    train_encoded = bb.encode_batch(arts.train_samples, params.schema)
    test_encoded = bb.encode_batch(arts.test_samples, params.schema) if eval_each_epoch else None
    train_m = matrices_by_split.get("train", {})
    test_m = matrices_by_split.get("test", {})
    named = dict(params.named_parameters())
    if adaptor is not None:
        named.update(dict(adaptor.named_parameters()))
    tensors = list(named.values())
    state = T.AdamState()
    rng = np.random.default_rng(config.run.seed)
    history: list[EpochMetrics] = []
    best = (-np.inf, 0, None)
    bad_epochs = 0
    batch_size = config.run.batch_size
    n = train_encoded.size
    step_times = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            t0 = time.perf_counter()
            with T.Tape() as tape:
                aug = _adaptor_outputs(adaptor, slots, train_m, idx)
                probs = bb.forward_batch(batch_slice(train_encoded, idx), aug, params)
                loss = bb.bce_loss(probs, train_encoded.labels[idx])
            grads = T.backward(tape, loss)
            T.adam_step(tensors, grads, state, lr=lr)
            step_times.append(time.perf_counter() - t0)
        if not eval_each_epoch:
            continue
        auc_value, ll_value = _evaluate(params, adaptor, slots, test_encoded, test_m,
                                        batch_size)
        history.append(EpochMetrics(epoch, auc_value, ll_value))
        if auc_value > best[0]:
            best = (auc_value, epoch, {k: v.data.copy() for k, v in named.items()})
            bad_epochs = 0
        else:
            bad_epochs += 1
            if patience is not None and bad_epochs >= patience:
                break
    if best[2] is not None:
        for name, tensor in named.items():
            tensor.data = best[2][name]
    if timings is not None and step_times:
        timings["train_seconds_per_batch_mean"] = float(np.mean(step_times))
    return history


def train_joint(arts: CorpusArtifacts, store: kn.VectorStore | None, config: RunConfig,
                cluster_arts: ClusterArtifacts | None = None,
                timings: dict | None = None) -> tuple[Path, RunReport]:
    """Joint backbone(+adaptor) optimization; returns the checkpoint path and
    the deterministic run report."""
    if not arts.train_samples or not arts.test_samples:
        raise PipelineError("empty train or test split")
    slots = config.aug_slots()
    if slots and store is None:
        raise PipelineError("representation store missing; run the encode stage first")
    rundir = config.rundir()
    adaptor = None
    misses: dict[str, int] = {}
    matrices_by_split: dict[str, dict[str, np.ndarray]] = {}
    if slots:
        hein_config = hx.HeinConfig(
            input_dim=store.dim, output_dim=config.knowledge.aug_dim,
            n_shared=config.knowledge.n_shared, n_user=config.knowledge.n_user,
            n_item=config.knowledge.n_item, hidden=config.knowledge.expert_hidden)
        adaptor = hx.adaptor_variant(config.run.adaptor, hein_config, config.run.seed)
        train_m, train_miss = gather_representations(arts.train_samples, slots, store,
                                                     cluster_arts, config.run.mode)
        test_m, test_miss = gather_representations(arts.test_samples, slots, store,
                                                   cluster_arts, config.run.mode)
        matrices_by_split = {"train": train_m, "test": test_m}
        misses = {k: train_miss[k] + test_miss[k] for k in train_miss}
    params = bb.init_backbone(config.run.backbone, arts.schema, aug_slots=slots,
                              aug_dim=config.knowledge.aug_dim if slots else 0,
                              seed=config.run.seed)

    best_history: list[EpochMetrics] = []
    best_auc = -np.inf
    best_named: dict[str, np.ndarray] | None = None
    for lr in config.run.learning_rates:
        if len(config.run.learning_rates) > 1:
            params = bb.init_backbone(config.run.backbone, arts.schema, aug_slots=slots,
                                      aug_dim=config.knowledge.aug_dim if slots else 0,
                                      seed=config.run.seed)
            if slots:
                adaptor = hx.adaptor_variant(config.run.adaptor, hein_config, config.run.seed)
        history = _train_params(params, adaptor, arts, matrices_by_split, config,
                                epochs=config.run.epochs, lr=lr,
                                patience=config.run.patience, timings=timings)
        top = max(history, key=lambda m: m.auc)
        if top.auc > best_auc:
            best_auc = top.auc
            best_history = history
            named = dict(params.named_parameters())
            if adaptor is not None:
                named.update(dict(adaptor.named_parameters()))
            best_named = {k: v.data.copy() for k, v in named.items()}

    named = dict(params.named_parameters())
    if adaptor is not None:
        named.update(dict(adaptor.named_parameters()))
    for key, value in best_named.items():
        named[key].data = value
    checkpoint_path = rundir / "model.ckpt"
    T.save_checkpoint(checkpoint_path, {k: T.const(v) for k, v in best_named.items()})
    best_epoch = max(best_history, key=lambda m: m.auc)
    report = RunReport(
        mode=config.run.mode, config_hash=config.config_hash(), epochs=best_history,
        best_epoch=best_epoch.epoch, final_auc=best_epoch.auc,
        final_logloss=best_epoch.logloss, default_misses=misses,
        n_train=len(arts.train_samples), n_test=len(arts.test_samples))
    return checkpoint_path, report


# ---------------------------------------------------------------------------
# augmented-vector precompute & serving paths
# ---------------------------------------------------------------------------

_KIND_SIDE = {"user": "user", "user_cluster": "user", "user_history": "user",
              "item": "item", "item_cluster": "item", "item_desc": "item"}


def build_adaptor_from_checkpoint(checkpoint_path, config: RunConfig,
                                  input_dim: int) -> hx.HeinParams:
    hein_config = hx.HeinConfig(
        input_dim=input_dim, output_dim=config.knowledge.aug_dim,
        n_shared=config.knowledge.n_shared, n_user=config.knowledge.n_user,
        n_item=config.knowledge.n_item, hidden=config.knowledge.expert_hidden)
    adaptor = hx.adaptor_variant(config.run.adaptor, hein_config, config.run.seed)
    values = T.load_checkpoint(checkpoint_path)
    adaptor.load(values)
    return adaptor


def precompute_augmented(checkpoint_path, store: kn.VectorStore, config: RunConfig,
                         out_path=None) -> Path:
    """Run the adaptor once per stored key and write the q-dim store plus a
    manifest binding the checkpoint to the output (detached serving)."""
    out_path = Path(out_path) if out_path else config.rundir() / "aug.vec"
    adaptor = build_adaptor_from_checkpoint(checkpoint_path, config, store.dim)
    if config.knowledge.aug_dim != adaptor.config.output_dim:
        raise PipelineError("checkpoint adaptor dim does not match configuration")
    aug_store = kn.VectorStore.create(out_path, config.knowledge.aug_dim)
    by_kind: dict[str, list[tuple[str, np.ndarray]]] = {}
    for kind, key, vec in store.items():
        if key == kn.DEFAULT_KEY:
            continue
        by_kind.setdefault(kind, []).append((key, vec.astype(np.float64)))
    for kind, entries in sorted(by_kind.items()):
        matrix = np.stack([vec for _, vec in entries])
        out = hx.forward_side(T.const(matrix), _KIND_SIDE[kind], adaptor).data
        for (key, _), row in zip(entries, out):
            aug_store.put(key, row.astype(np.float32), kind)
    kn.compute_defaults(aug_store)
    aug_store.close()
    checkpoint_crc = crc64(Path(checkpoint_path).read_bytes())
    manifest = {
        "checkpoint": str(checkpoint_path),
        "checkpoint_crc64": f"{checkpoint_crc:016x}",
        "source_store": str(store.path),
        "aug_dim": config.knowledge.aug_dim,
        "keys": aug_store.count,
    }
    Path(str(out_path) + ".manifest.json").write_text(json.dumps(manifest, indent=2,
                                                                 sort_keys=True))
    return out_path


class ServingModel:
    """Frozen-parameter inference over one of the three serving paths."""

    def __init__(self, path: str, params: bb.BackboneParams,
                 adaptor: hx.HeinParams | None, config: RunConfig,
                 repr_store: kn.VectorStore | None, aug_store: kn.VectorStore | None,
                 cluster_arts: ClusterArtifacts | None):
        self.path = path
        self.params = params
        self.adaptor = adaptor
        self.config = config
        self.repr_store = repr_store
        self.aug_store = aug_store
        self.cluster_arts = cluster_arts

    @classmethod
    def load(cls, path: str, checkpoint_path, config: RunConfig, schema: bb.FeatureSchema,
             repr_store: kn.VectorStore | None = None,
             aug_store: kn.VectorStore | None = None,
             cluster_arts: ClusterArtifacts | None = None) -> "ServingModel":
        if path not in ("full_hein", "detached", "base"):
            raise PipelineError(f"unknown serving path: {path!r}")
        slots = () if path == "base" else config.aug_slots()
        aug_dim = config.knowledge.aug_dim if slots else 0
        params = bb.init_backbone(config.run.backbone, schema, aug_slots=slots,
                                  aug_dim=aug_dim, seed=config.run.seed)
        adaptor = None
        if path != "base":
            values = T.load_checkpoint(checkpoint_path)
            params.load(values)
            if path == "full_hein":
                if repr_store is None:
                    raise PipelineError("full adaptor path needs the representation store")
                adaptor = build_adaptor_from_checkpoint(checkpoint_path, config,
                                                        repr_store.dim)
            elif aug_store is None:
                raise PipelineError("detached path needs the augmented-vector store")
        return cls(path, params, adaptor, config, repr_store, aug_store, cluster_arts)

    def predict_batch(self, samples: Sequence[cp.Sample]) -> np.ndarray:
        encoded = bb.encode_batch(samples, self.params.schema)
        slots = self.params.aug_slots
        if not slots:
            return bb.forward_batch(encoded, {}, self.params).data[:, 0]
        if self.path == "full_hein":
            matrices, _ = gather_representations(samples, slots, self.repr_store,
                                                 self.cluster_arts, self.config.run.mode)
            aug = {slot: hx.forward_side(T.const(matrices[slot]), slot_side(slot),
                                         self.adaptor)
                   for slot in slots}
        else:
            matrices, _ = gather_representations(samples, slots, self.aug_store,
                                                 self.cluster_arts, self.config.run.mode)
            aug = matrices
        return bb.forward_batch(encoded, aug, self.params).data[:, 0]


def path_equivalence(full: ServingModel, detached: ServingModel,
                     samples: Sequence[cp.Sample], batch_size: int = 256) -> float:
    """max |score_full - score_detached| over the given samples."""
    worst = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = list(samples[start:start + batch_size])
        a = full.predict_batch(chunk)
        b = detached.predict_batch(chunk)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


@dataclass
class TimingStats:
    path: str
    batches: int
    batch_size: int
    mean_seconds: float
    p95_seconds: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def bench_latency(model: ServingModel, samples: Sequence[cp.Sample], batches: int,
                  batch_size: int = 256, warmup: int = 10) -> TimingStats:
    """Mean/p95 per-batch wall time on a monotonic clock, single BLAS thread,
    first `warmup` batches excluded."""
    if batches < 1:
        raise PipelineError(f"need at least 1 measured batch, got {batches}")
    if not samples:
        raise PipelineError("no samples to benchmark")
    pool = list(samples)
    while len(pool) < batch_size:
        pool = pool + pool
    times: list[float] = []

    def run_batches():
        rng = np.random.default_rng(0)
        for b in range(warmup + batches):
            idx = rng.integers(0, len(pool), size=batch_size)
            chunk = [pool[i] for i in idx]
            t0 = time.perf_counter()
            model.predict_batch(chunk)
            elapsed = time.perf_counter() - t0
            if b >= warmup:
                times.append(elapsed)

    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            run_batches()
    except ImportError:
        run_batches()
    arr = np.asarray(times)
    return TimingStats(model.path, batches, batch_size, float(arr.mean()),
                       float(np.percentile(arr, 95)))


# ---------------------------------------------------------------------------
# full-run orchestration
# ---------------------------------------------------------------------------

def write_report(report: RunReport, config: RunConfig, timings: dict | None = None) -> Path:
    rundir = config.rundir()
    out = rundir / "report.json"
    out.write_text(report.to_json(), encoding="utf-8")
    if timings:
        (rundir / "timings.json").write_text(json.dumps(timings, sort_keys=True, indent=2))
    return out


def run_pipeline(config: RunConfig, client: pr.LLMClient | None = None,
                 encoder: kn.TextEncoder | None = None) -> tuple[Path, RunReport]:
    """Execute every stage the configured mode needs and write report.json."""
    timings: dict = {}
    arts = load_corpus(config)
    cluster_arts = None
    call_count = 0
    store = None
    if config.run.mode != "base":
        if config.run.mode == "reki_c":
            cluster_dir = config.rundir() / "clusters"
            if (cluster_dir / "clusters.jsonl").exists():
                cluster_arts = read_cluster_artifacts(cluster_dir)
            else:
                cluster_arts = build_clusters(arts, config)
                write_cluster_artifacts(cluster_arts, cluster_dir)
        knowledge_result = run_knowledge_stage(arts, config, cluster_arts, client)
        call_count = knowledge_result.call_count
        store_path = run_encode_stage(arts, config, cluster_arts, encoder)
        store = kn.VectorStore.open(store_path)
    checkpoint, report = train_joint(arts, store, config, cluster_arts, timings)
    report.llm_call_count = call_count
    if store is not None:
        precompute_augmented(checkpoint, store, config)
        store.close()
    write_report(report, config, timings)
    return checkpoint, report


def read_cluster_artifacts(cluster_dir: Path) -> ClusterArtifacts:
    item_clusters: list[cl.Cluster] = []
    user_clusters: list[cl.Cluster] = []
    with open(cluster_dir / "clusters.jsonl", encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            cluster = cl.Cluster(d["cluster_id"], d["kind"], tuple(d["members"]),
                                 tuple(d["representation_items"]))
            (item_clusters if d["kind"] == "item" else user_clusters).append(cluster)
    item_assignment = {m: c.cluster_id for c in item_clusters for m in c.member_ids}
    user_assignment = {m: c.cluster_id for c in user_clusters for m in c.member_ids}
    return ClusterArtifacts(item_assignment, user_assignment, item_clusters, user_clusters)
