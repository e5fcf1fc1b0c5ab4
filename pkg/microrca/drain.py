"""
Fixed-depth parse-tree log template miner.

The first tree level is keyed by token count, the following levels by the
leading tokens of a message, and leaves hold clusters. A message joins the
most similar cluster at its leaf when the share of identical tokens at
identical positions reaches the similarity threshold; positions that differ
become wildcards.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

from .error import CorruptModelFile, EmptyCorpus
from .resources import DEFAULT_MASKING_RULES
from .settings import WILDCARD

LOGGER = logging.getLogger(__name__)

MODEL_MAGIC = "microrca-drain-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class DrainParams:
    tree_depth: int = 4
    similarity_threshold: float = 0.4
    max_children_per_node: int = 100
    masking_rules: Tuple[Tuple[str, str], ...] = DEFAULT_MASKING_RULES

    def __post_init__(self) -> None:
        if self.tree_depth < 3:
            raise ValueError(f"tree_depth must be >= 3, got {self.tree_depth}")
        if not 0 < self.similarity_threshold < 1:
            raise ValueError(
                f"similarity_threshold must be in (0, 1), got {self.similarity_threshold}"
            )
        if self.max_children_per_node < 1:
            raise ValueError(
                f"max_children_per_node must be >= 1, got {self.max_children_per_node}"
            )
        # Normalize to tuples so params compare and hash by value
        object.__setattr__(
            self, "masking_rules", tuple((str(p), str(r)) for p, r in self.masking_rules)
        )

    def to_dict(self) -> dict:
        return {
            "tree_depth": self.tree_depth,
            "similarity_threshold": self.similarity_threshold,
            "max_children_per_node": self.max_children_per_node,
            "masking_rules": [list(rule) for rule in self.masking_rules],
        }


@dataclass
class TemplateCluster:
    template_id: int
    tokens: List[str]
    match_count: int = 1

    @property
    def template(self) -> str:
        return " ".join(self.tokens)


class TemplateMatch(NamedTuple):
    template_id: int
    template: str


@dataclass
class Node:
    children: Dict[str, "Node"] = field(default_factory=dict)
    cluster_ids: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {}
        if self.children:
            d["children"] = {k: v.to_dict() for k, v in self.children.items()}
        if self.cluster_ids:
            d["clusters"] = list(self.cluster_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        return cls(
            children={k: cls.from_dict(v) for k, v in d.get("children", {}).items()},
            cluster_ids=[int(i) for i in d.get("clusters", [])],
        )


_compiled_rules: Dict[Tuple[Tuple[str, str], ...], List[Tuple[re.Pattern, str]]] = {}


def _compile(rules: Sequence[Tuple[str, str]]) -> List[Tuple[re.Pattern, str]]:
    key = tuple((p, r) for p, r in rules)
    if key not in _compiled_rules:
        _compiled_rules[key] = [(re.compile(p), r) for p, r in key]
    return _compiled_rules[key]


def mask(message: str, rules: Sequence[Tuple[str, str]] = DEFAULT_MASKING_RULES) -> List[str]:
    """Splits a message on whitespace and masks variable tokens."""
    compiled = _compile(rules)
    tokens = []
    for token in message.split():
        for pattern, replacement in compiled:
            if pattern.fullmatch(token):
                token = replacement
                break
        tokens.append(token)
    return tokens


def _has_digits(token: str) -> bool:
    return any(c.isdigit() for c in token)


class DrainModel:
    def __init__(self, params: DrainParams = None) -> None:
        self.params = params or DrainParams()
        self.root = Node()
        self.clusters: Dict[int, TemplateCluster] = {}

    @property
    def _prefix_depth(self) -> int:
        # root and token-count levels come before the leading-token levels
        return self.params.tree_depth - 2

    def __len__(self) -> int:
        return len(self.clusters)

    def templates(self) -> List[TemplateCluster]:
        return [self.clusters[i] for i in sorted(self.clusters)]

    def mask(self, message: str) -> List[str]:
        return mask(message, self.params.masking_rules)

    def _similarity(self, template: List[str], tokens: List[str], include_wildcards: bool) -> Tuple[float, int]:
        equal = wildcards = 0
        for t, w in zip(template, tokens):
            if t == WILDCARD:
                wildcards += 1
                if include_wildcards:
                    equal += 1
            elif t == w:
                equal += 1
        return equal / len(tokens), wildcards

    def _leaves(self, tokens: List[str]) -> List[Node]:
        """Leaves a token sequence can route to: the literal path first, then wildcard detours."""
        length_node = self.root.children.get(str(len(tokens)))
        if length_node is None:
            return []
        frontier = [length_node]
        for token in tokens[:self._prefix_depth]:
            nxt = []
            for node in frontier:
                if token in node.children:
                    nxt.append(node.children[token])
                if token != WILDCARD and WILDCARD in node.children:
                    nxt.append(node.children[WILDCARD])
            frontier = nxt
            if not frontier:
                break
        return frontier

    def _best_cluster(self, tokens: List[str], include_wildcards: bool) -> Tuple[Optional[TemplateCluster], float]:
        best, best_key = None, None
        for leaf in self._leaves(tokens):
            for cid in leaf.cluster_ids:
                cluster = self.clusters[cid]
                sim, wildcards = self._similarity(cluster.tokens, tokens, include_wildcards)
                key = (sim, wildcards, -cid)
                if best_key is None or key > best_key:
                    best, best_key = cluster, key
        if best is None or best_key[0] < self.params.similarity_threshold:
            return None, 0.0 if best_key is None else best_key[0]
        return best, best_key[0]

    def _add_to_tree(self, cluster: TemplateCluster) -> None:
        tokens = cluster.tokens
        key = str(len(tokens))
        node = self.root.children.setdefault(key, Node())
        for token in tokens[:self._prefix_depth]:
            if token in node.children:
                node = node.children[token]
                continue
            if _has_digits(token) or token == WILDCARD:
                node = node.children.setdefault(WILDCARD, Node())
            elif len(node.children) < self.params.max_children_per_node - 1 or (
                    WILDCARD in node.children
                    and len(node.children) < self.params.max_children_per_node):
                node = node.children.setdefault(token, Node())
            else:
                # full: overflow goes to the catch-all child
                node = node.children.setdefault(WILDCARD, Node())
        node.cluster_ids.append(cluster.template_id)

    def add_message(self, message: str) -> Optional[TemplateCluster]:
        """Absorbs one training message. Returns its cluster, or None for empty messages."""
        tokens = self.mask(message)
        if not tokens:
            return None
        cluster, _ = self._best_cluster(tokens, include_wildcards=False)
        if cluster is None:
            cluster = TemplateCluster(template_id=len(self.clusters), tokens=tokens)
            self.clusters[cluster.template_id] = cluster
            self._add_to_tree(cluster)
        else:
            cluster.tokens = [
                t if t == w else WILDCARD for t, w in zip(cluster.tokens, tokens)
            ]
            cluster.match_count += 1
        return cluster

    def match(self, message: str) -> Optional[TemplateMatch]:
        """Read-only lookup. None when no cluster is similar enough."""
        tokens = self.mask(message)
        if not tokens:
            return None
        cluster, _ = self._best_cluster(tokens, include_wildcards=True)
        if cluster is None:
            return None
        return TemplateMatch(cluster.template_id, cluster.template)

    def to_dict(self) -> dict:
        return {
            "magic": MODEL_MAGIC,
            "version": MODEL_VERSION,
            "params": self.params.to_dict(),
            "clusters": [
                {"id": c.template_id, "tokens": c.tokens, "count": c.match_count}
                for c in self.templates()
            ],
            "tree": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DrainModel":
        if not isinstance(d, dict) or d.get("magic") != MODEL_MAGIC:
            raise CorruptModelFile("Not a drain model file (bad magic header)")
        if d.get("version") != MODEL_VERSION:
            raise CorruptModelFile(
                f"Unsupported drain model version {d.get('version')!r}, expected {MODEL_VERSION}"
            )
        try:
            p = d["params"]
            params = DrainParams(
                tree_depth=p["tree_depth"],
                similarity_threshold=p["similarity_threshold"],
                max_children_per_node=p["max_children_per_node"],
                masking_rules=tuple(tuple(rule) for rule in p["masking_rules"]),
            )
            model = cls(params)
            for c in d["clusters"]:
                cluster = TemplateCluster(int(c["id"]), list(c["tokens"]), int(c["count"]))
                model.clusters[cluster.template_id] = cluster
            model.root = Node.from_dict(d["tree"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptModelFile(f"Malformed drain model: {e}") from e
        if sorted(model.clusters) != list(range(len(model.clusters))):
            raise CorruptModelFile("Template ids are not dense from 0")
        return model


def train(corpus: Iterable[str], params: DrainParams = None) -> DrainModel:
    """Trains a model on messages in corpus order. Deterministic."""
    model = DrainModel(params)
    seen = empty = 0
    for message in corpus:
        seen += 1
        if model.add_message(message) is None:
            empty += 1
    if empty:
        LOGGER.warning("Ignored %d empty message(s) while training", empty)
    if not model.clusters:
        raise EmptyCorpus(f"No trainable messages in a corpus of {seen}")
    LOGGER.info("Trained %d template(s) from %d message(s)", len(model), seen - empty)
    return model


def match_template(model: DrainModel, message: str) -> Optional[TemplateMatch]:
    return model.match(message)


def save_model(model: DrainModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(model.to_dict(), indent=1, sort_keys=True))
    return path


def load_model(path: Union[str, Path]) -> DrainModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise CorruptModelFile(f"{path} is not valid JSON: {e}") from e
    return DrainModel.from_dict(data)
