"""Genome data model: a DAG of typed layer nodes describing a CNN.

A genome has exactly one input node (the unique source) and exactly one
classifier head (the unique sink).  Interior nodes are convolutions,
max-pools, skip joins, channel concatenations, global average pools,
fully connected layers and dropout layers.  Genomes are immutable by
convention: every edit builds a new Genome and leaves the old one alone.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

INPUT = "input"
CONV = "conv"
MAXPOOL = "maxpool"
FC = "fc"
DROPOUT = "dropout"
SKIP = "skip"
CONCAT = "concat"
GLOBALPOOL = "globalpool"
HEAD = "head"

ALL_KINDS = (INPUT, CONV, MAXPOOL, FC, DROPOUT, SKIP, CONCAT, GLOBALPOOL, HEAD)

# One letter per kind; canonical sequences are strings over this alphabet.
KIND_LETTERS = {
    INPUT: "I",
    CONV: "C",
    MAXPOOL: "P",
    FC: "F",
    DROPOUT: "D",
    SKIP: "S",
    CONCAT: "K",
    GLOBALPOOL: "G",
    HEAD: "H",
}

# Trunk nodes carry spatial (c, h, w) tensors; tail nodes carry flat vectors
# (globalpool sits at the boundary and is grouped with the tail for placement).
TRUNK_KINDS = frozenset({INPUT, CONV, MAXPOOL, SKIP, CONCAT})
TAIL_KINDS = frozenset({FC, DROPOUT, GLOBALPOOL, HEAD})

# Required hyperparameter keys per kind.
PARAM_KEYS = {
    INPUT: (),
    CONV: ("channels", "filter", "stride", "pad"),
    MAXPOOL: ("kernel", "stride"),
    FC: ("units",),
    DROPOUT: ("ratio",),
    SKIP: (),
    CONCAT: (),
    GLOBALPOOL: (),
    HEAD: ("classes",),
}

FILTER_MENU = (1, 3, 5)
STRIDE_MENU = (1, 2)


class ShapeError(Exception):
    """Tensor shapes along the graph are inconsistent or degenerate."""

    def __init__(self, node_id, message):
        self.node_id = node_id
        super().__init__(f"node {node_id}: {message}")


class InvalidGenome(Exception):
    """Structural or placement rule violated."""


class ParseError(Exception):
    """Malformed genome file."""


@dataclass(frozen=True)
class Node:
    kind: str
    params: dict = field(default_factory=dict)


def conv_node(channels, filter=3, stride=1, pad=None):
    if pad is None:
        pad = filter // 2
    return Node(CONV, {"channels": channels, "filter": filter, "stride": stride, "pad": pad})


def maxpool_node(kernel=2, stride=2):
    return Node(MAXPOOL, {"kernel": kernel, "stride": stride})


def fc_node(units):
    return Node(FC, {"units": units})


def dropout_node(ratio=0.5):
    return Node(DROPOUT, {"ratio": ratio})


class Genome:
    """Immutable-by-convention layer DAG.

    nodes maps node id to Node; preds maps node id to a tuple of
    predecessor ids kept sorted ascending (the canonical order, which
    also fixes concat channel order).  Node ids double as creation
    order: new nodes always get max(ids) + 1.
    """

    __slots__ = ("input_shape", "num_classes", "nodes", "preds")

    def __init__(self, input_shape, num_classes, nodes, preds):
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.nodes = nodes
        self.preds = {i: tuple(sorted(p)) for i, p in preds.items()}

    def __eq__(self, other):
        if not isinstance(other, Genome):
            return NotImplemented
        return (
            self.input_shape == other.input_shape
            and self.num_classes == other.num_classes
            and self.nodes == other.nodes
            and self.preds == other.preds
        )

    def __ne__(self, other):
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    def __repr__(self):
        return f"Genome({len(self.nodes)} nodes, in={self.input_shape}, classes={self.num_classes})"

    def successors(self):
        """Map node id -> sorted tuple of consumer ids (duplicates kept)."""
        succ = {i: [] for i in self.nodes}
        for dst, ps in self.preds.items():
            for src in ps:
                succ[src].append(dst)
        return {i: tuple(sorted(s)) for i, s in succ.items()}

    def next_id(self):
        return max(self.nodes) + 1

    def input_id(self):
        for i, n in self.nodes.items():
            if n.kind == INPUT:
                return i
        raise InvalidGenome("no input node")

    def head_id(self):
        for i, n in self.nodes.items():
            if n.kind == HEAD:
                return i
        raise InvalidGenome("no head node")

    def replace(self, nodes=None, preds=None):
        return Genome(
            self.input_shape,
            self.num_classes,
            self.nodes if nodes is None else nodes,
            self.preds if preds is None else preds,
        )


def topological_order(genome):
    """Node ids in topological order, ready set drained smallest id first.

    Raises InvalidGenome if the graph has a cycle.
    """
    indeg = {i: len(set(genome.preds[i])) for i in genome.nodes}
    # a duplicated predecessor contributes one dependency, not two
    ready = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    succ = genome.successors()
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in dict.fromkeys(succ[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, j)
    if len(order) != len(genome.nodes):
        raise InvalidGenome("graph has a cycle")
    return order


def new_seed_genome(kind, input_shape=(3, 32, 32), num_classes=10):
    """Minimal starting genome: input plus one hidden layer plus head.

    kind is "global_pool" (input -> globalpool -> head) or
    "fully_connected" (input -> fc(100) -> head).
    """
    if kind == "global_pool":
        mid = Node(GLOBALPOOL)
    elif kind == "fully_connected":
        mid = fc_node(100)
    else:
        raise ValueError(f"unknown seed kind {kind!r}")
    nodes = {0: Node(INPUT), 1: mid, 2: Node(HEAD, {"classes": num_classes})}
    preds = {0: (), 1: (0,), 2: (1,)}
    return Genome(input_shape, num_classes, nodes, preds)


def _conv_side(side, filter, stride, pad):
    return (side + 2 * pad - filter) // stride + 1


def _pool_side(side, kernel, stride):
    return (side - kernel) // stride + 1


def _flatten(shape):
    n = 1
    for d in shape:
        n *= d
    return n


def node_output_shape(genome, i, shapes):
    """Shape of node i given its predecessors' shapes (see infer_shapes)."""
    node = genome.nodes[i]
    ins = [shapes[p] for p in genome.preds[i]]
    if node.kind == INPUT:
        return genome.input_shape
    if node.kind == CONV:
        (c, h, w) = _require_spatial(i, ins[0])
        p = node.params
        oh = _conv_side(h, p["filter"], p["stride"], p["pad"])
        ow = _conv_side(w, p["filter"], p["stride"], p["pad"])
        if oh < 1 or ow < 1:
            raise ShapeError(i, f"conv output {oh}x{ow} not positive for input {h}x{w}")
        return (p["channels"], oh, ow)
    if node.kind == MAXPOOL:
        (c, h, w) = _require_spatial(i, ins[0])
        p = node.params
        oh = _pool_side(h, p["kernel"], p["stride"])
        ow = _pool_side(w, p["kernel"], p["stride"])
        if oh < 1 or ow < 1:
            raise ShapeError(i, f"pool output {oh}x{ow} not positive for input {h}x{w}")
        return (c, oh, ow)
    if node.kind == SKIP:
        a, b = (_require_spatial(i, s) for s in ins)
        if a[1:] != b[1:]:
            raise ShapeError(i, f"skip spatial mismatch {a} vs {b}")
        if a[0] != b[0]:
            raise ShapeError(i, f"skip channel mismatch {a} vs {b}")
        return a
    if node.kind == CONCAT:
        a, b = (_require_spatial(i, s) for s in ins)
        if a[1:] != b[1:]:
            raise ShapeError(i, f"concat spatial mismatch {a} vs {b}")
        return (a[0] + b[0], a[1], a[2])
    if node.kind == GLOBALPOOL:
        (c, h, w) = _require_spatial(i, ins[0])
        return (c, 1, 1)
    if node.kind == FC:
        return (node.params["units"],)
    if node.kind == DROPOUT:
        return ins[0]
    if node.kind == HEAD:
        return (node.params["classes"],)
    raise ShapeError(i, f"unknown kind {node.kind!r}")


def infer_shapes(genome):
    """Output shape of every node: (c, h, w) for trunk nodes, (n,) for flat.

    Raises ShapeError on inconsistent joins, non-positive spatial dims, or
    spatial ops applied to flat vectors.
    """
    shapes = {}
    for i in topological_order(genome):
        shapes[i] = node_output_shape(genome, i, shapes)
    return shapes


def _require_spatial(node_id, shape):
    if len(shape) != 3:
        raise ShapeError(node_id, f"needs a spatial input, got {shape}")
    return shape


def canonical_node_sequence(genome):
    """Kind letters in topological order, ids breaking ties."""
    return "".join(KIND_LETTERS[genome.nodes[i].kind] for i in topological_order(genome))


def sequence_distance(sa, sb):
    """Positions where two kind sequences differ, shorter one blank-padded."""
    if len(sa) < len(sb):
        sa, sb = sb, sa
    sb = sb.ljust(len(sa), " ")
    return sum(1 for x, y in zip(sa, sb) if x != y)


def hamming_distance(a, b):
    """Positions where the canonical sequences differ, shorter one padded."""
    return sequence_distance(canonical_node_sequence(a), canonical_node_sequence(b))


def parameter_count(genome):
    """Trainable parameter total: convs carry batchnorm scale/shift, the
    head counts as a fully connected layer, joins and pools carry none."""
    shapes = infer_shapes(genome)
    total = 0
    for i in topological_order(genome):
        node = genome.nodes[i]
        if node.kind == CONV:
            cin = shapes[genome.preds[i][0]][0]
            cout = node.params["channels"]
            f = node.params["filter"]
            total += cout * cin * f * f + cout + 2 * cout
        elif node.kind in (FC, HEAD):
            nin = _flatten(shapes[genome.preds[i][0]])
            nout = node.params["units"] if node.kind == FC else node.params["classes"]
            total += nout * nin + nout
    return total


def validate(genome):
    """Raise InvalidGenome unless the genome is structurally sound,
    shape-consistent and obeys the layer placement rules."""
    nodes = genome.nodes
    if set(nodes) != set(genome.preds):
        raise InvalidGenome("nodes and preds disagree on ids")
    inputs = [i for i, n in nodes.items() if n.kind == INPUT]
    heads = [i for i, n in nodes.items() if n.kind == HEAD]
    if len(inputs) != 1:
        raise InvalidGenome(f"expected exactly one input node, found {len(inputs)}")
    if len(heads) != 1:
        raise InvalidGenome(f"expected exactly one head node, found {len(heads)}")
    head = heads[0]

    for i, n in nodes.items():
        if n.kind not in KIND_LETTERS:
            raise InvalidGenome(f"node {i}: unknown kind {n.kind!r}")
        want = 0 if n.kind == INPUT else 2 if n.kind in (SKIP, CONCAT) else 1
        if len(genome.preds[i]) != want:
            raise InvalidGenome(f"node {i} ({n.kind}) needs {want} predecessors")
        for p in genome.preds[i]:
            if p not in nodes:
                raise InvalidGenome(f"node {i} references missing predecessor {p}")
        _check_params(i, n)

    order = topological_order(genome)  # raises on cycles

    succ = genome.successors()
    if succ[head]:
        raise InvalidGenome("head must be the unique sink")
    for i in nodes:
        if i != head and not succ[i]:
            raise InvalidGenome(f"node {i} has no path to the head")

    reach = {inputs[0]}
    for i in order:
        if any(p in reach for p in genome.preds[i]):
            reach.add(i)
    missing = set(nodes) - reach
    if missing:
        raise InvalidGenome(f"nodes {sorted(missing)} unreachable from the input")

    # placement: the flat tail (fc/dropout/globalpool/head) never feeds a
    # trunk node, the head sees a flat vector, dropout stays in the tail
    for i, n in nodes.items():
        pred_kinds = [nodes[p].kind for p in genome.preds[i]]
        if n.kind in (CONV, MAXPOOL, SKIP, CONCAT):
            bad = [k for k in pred_kinds if k not in TRUNK_KINDS]
            if bad:
                raise InvalidGenome(f"node {i} ({n.kind}) fed by tail layer {bad[0]}")
        elif n.kind == GLOBALPOOL:
            if pred_kinds[0] not in TRUNK_KINDS:
                raise InvalidGenome(f"node {i} (globalpool) fed by tail layer {pred_kinds[0]}")
        elif n.kind == HEAD:
            if pred_kinds[0] not in (FC, DROPOUT, GLOBALPOOL):
                raise InvalidGenome(f"head fed by {pred_kinds[0]}, needs a flat layer")
        elif n.kind == DROPOUT:
            if pred_kinds[0] not in (FC, DROPOUT, GLOBALPOOL):
                raise InvalidGenome(f"node {i} (dropout) outside the flat tail")

    try:
        infer_shapes(genome)
    except ShapeError as e:
        raise InvalidGenome(str(e)) from e

    if nodes[head].params["classes"] != genome.num_classes:
        raise InvalidGenome("head class count disagrees with genome num_classes")


def _check_params(i, node):
    keys = PARAM_KEYS[node.kind]
    if set(node.params) != set(keys):
        raise InvalidGenome(f"node {i} ({node.kind}) params must be {sorted(keys)}")
    p = node.params
    if node.kind == CONV:
        if p["channels"] < 1:
            raise InvalidGenome(f"node {i}: conv channels must be positive")
        if p["filter"] not in FILTER_MENU:
            raise InvalidGenome(f"node {i}: conv filter must be one of {FILTER_MENU}")
        if p["stride"] not in STRIDE_MENU:
            raise InvalidGenome(f"node {i}: conv stride must be one of {STRIDE_MENU}")
        if p["pad"] < 0:
            raise InvalidGenome(f"node {i}: conv pad must be non-negative")
    elif node.kind == MAXPOOL:
        if p["kernel"] < 1 or p["stride"] < 1:
            raise InvalidGenome(f"node {i}: pool kernel and stride must be positive")
    elif node.kind == FC:
        if p["units"] < 1:
            raise InvalidGenome(f"node {i}: fc units must be positive")
    elif node.kind == DROPOUT:
        if not 0.0 < p["ratio"] < 1.0:
            raise InvalidGenome(f"node {i}: dropout ratio must be in (0, 1)")
    elif node.kind == HEAD:
        if p["classes"] < 2:
            raise InvalidGenome(f"node {i}: head needs at least two classes")


def is_valid(genome):
    try:
        validate(genome)
        return True
    except InvalidGenome:
        return False


def serialize(genome):
    """UTF-8 JSON text; nodes sorted by id, edges lexicographic."""
    edges = []
    for dst in sorted(genome.preds):
        for src in genome.preds[dst]:
            edges.append([src, dst])
    edges.sort()
    doc = {
        "input_shape": list(genome.input_shape),
        "num_classes": genome.num_classes,
        "nodes": [
            {"id": i, "kind": genome.nodes[i].kind, "params": genome.nodes[i].params}
            for i in sorted(genome.nodes)
        ],
        "edges": edges,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def deserialize(text):
    """Parse serialize() output back into a Genome.

    Raises ParseError with a field diagnostic on malformed input; shape and
    placement problems are left to validate().
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"not valid JSON: {e.msg} at line {e.lineno} column {e.colno}") from e
    if not isinstance(doc, dict):
        raise ParseError("top level must be a JSON object")
    for key in ("input_shape", "num_classes", "nodes", "edges"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}")

    shape = doc["input_shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(d, int) and d > 0 for d in shape)):
        raise ParseError("input_shape must be three positive integers")
    if not isinstance(doc["num_classes"], int) or doc["num_classes"] < 2:
        raise ParseError("num_classes must be an integer of at least 2")

    nodes = {}
    for entry in doc["nodes"]:
        if not isinstance(entry, dict) or set(entry) != {"id", "kind", "params"}:
            raise ParseError(f"node entries need exactly id/kind/params, got {entry!r}")
        i = entry["id"]
        if not isinstance(i, int) or i < 0:
            raise ParseError(f"node id must be a non-negative integer, got {i!r}")
        if i in nodes:
            raise ParseError(f"duplicate node id {i}")
        kind = entry["kind"]
        if kind not in KIND_LETTERS:
            raise ParseError(f"node {i}: unknown kind {kind!r}")
        params = entry["params"]
        if not isinstance(params, dict) or set(params) != set(PARAM_KEYS[kind]):
            raise ParseError(f"node {i}: params for {kind} must be {sorted(PARAM_KEYS[kind])}")
        for k, v in params.items():
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ParseError(f"node {i}: param {k} must be a number")
        nodes[i] = Node(kind, dict(params))
    if not any(n.kind == INPUT for n in nodes.values()):
        raise ParseError("no input node")

    preds = {i: [] for i in nodes}
    for edge in doc["edges"]:
        if not (isinstance(edge, list) and len(edge) == 2):
            raise ParseError(f"edges must be [src, dst] pairs, got {edge!r}")
        src, dst = edge
        if src not in nodes or dst not in nodes:
            raise ParseError(f"edge {edge} references an unknown node id")
        preds[dst].append(src)
    return Genome(tuple(shape), doc["num_classes"], nodes, {i: tuple(p) for i, p in preds.items()})


def _dot_label(node):
    p = node.params
    if node.kind == CONV:
        return f"conv {p['channels']}c {p['filter']}x{p['filter']} s{p['stride']} p{p['pad']}"
    if node.kind == MAXPOOL:
        return f"maxpool {p['kernel']}x{p['kernel']} s{p['stride']}"
    if node.kind == FC:
        return f"fc {p['units']}"
    if node.kind == DROPOUT:
        return f"dropout {p['ratio']:g}"
    if node.kind == HEAD:
        return f"head {p['classes']}"
    return node.kind


def to_dot(genome):
    """Graphviz DOT text with one node per layer, edges in id order."""
    lines = ["digraph genome {", "  rankdir=TB;"]
    for i in sorted(genome.nodes):
        node = genome.nodes[i]
        label = _dot_label(node)
        if node.kind == INPUT:
            c, h, w = genome.input_shape
            label = f"input {c}x{h}x{w}"
        lines.append(f'  n{i} [label="{label}"];')
    edges = []
    for dst in sorted(genome.preds):
        for src in genome.preds[dst]:
            edges.append((src, dst))
    for src, dst in sorted(edges):
        lines.append(f"  n{src} -> n{dst};")
    lines.append("}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Individual:
    """A genome with bookkeeping for the evolutionary loop.

    fitness is None until evaluated; evaluated individuals are replaced
    wholesale, never mutated in place.
    """

    id: int
    genome: Genome
    fitness: float | None = None
    born_generation: int = 0
    parent_id: int | None = None
