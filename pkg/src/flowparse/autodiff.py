"""Minimal reverse-mode differentiation over a linear tape.

A forward pass appends one record per primitive application to a Tape.
Records are created in execution order, which is a topological order of
the computation graph, so the backward pass is a single reversed sweep.
Every record keeps a forward closure, so a tape can replay itself and
reproduce the forward values bitwise (used by tests as a structural
invariant).

Parameters are plain named arrays (`Param`).  Using the same Param twice
in one forward pass yields the same tape node, so gradients from shared
weights (e.g. a backbone applied to several frames) accumulate correctly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ContractViolation, DataError


class Param:
    """A named trainable array. `frozen` excludes it from sgd_step updates."""

    __slots__ = ("name", "data", "frozen")

    def __init__(self, name: str, data, frozen: bool = False):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)
        self.frozen = frozen

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape}, frozen={self.frozen})"


class Node:
    """One tape record: a value plus how it was computed."""

    __slots__ = ("data", "grad", "parents", "backward_rule", "forward_fn", "tape", "idx")

    def __init__(self, data, tape, parents=(), backward_rule=None, forward_fn=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.forward_fn = forward_fn
        self.tape = tape
        self.idx = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class Tape:
    """Owns the ordered record of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}

    def leaf(self, array, validate: bool = True) -> Node:
        data = np.asarray(array, dtype=np.float64)
        if validate and not np.all(np.isfinite(data)):
            raise ContractViolation("non-finite values in tape input")
        return Node(data, self)

    def param(self, p: Param) -> Node:
        """Node for a parameter; cached so reuse shares one record."""
        node = self._param_nodes.get(id(p))
        if node is None:
            node = Node(p.data, self)
            self._param_nodes[id(p)] = node
        return node

    def record(self, data, parents, backward_rule, forward_fn=None) -> Node:
        return Node(data, self, tuple(parents), backward_rule, forward_fn)

    def replay(self) -> None:
        """Recompute every non-leaf node in order from its parents.

        Overwrites node.data in place; results must be bitwise identical
        to the original forward pass (all primitives are deterministic).
        """
        for node in self.nodes:
            if node.forward_fn is not None:
                node.data = node.forward_fn()


def backward(tape: Tape, loss: Node, params) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter in `params`.

    `params` is an iterable of Param; parameters the loss does not depend
    on get zero gradients of matching shape.  Visits tape records in
    exact reverse creation order (reverse topological order).
    """
    if loss.tape is not tape:
        raise ContractViolation("loss node does not belong to this tape")
    if np.asarray(loss.data).size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.data.shape}")

    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(tape.nodes):
        if node.grad is not None and node.backward_rule is not None:
            node.backward_rule(node.grad)

    grads: dict[str, np.ndarray] = {}
    for p in params:
        node = tape._param_nodes.get(id(p))
        if node is None or node.grad is None:
            grads[p.name] = np.zeros_like(p.data)
        else:
            grads[p.name] = node.grad
    return grads


def sgd_step(params, grads: dict[str, np.ndarray], lr: float) -> None:
    """Plain SGD update p <- p - lr * g, in place. Frozen params are skipped."""
    if lr < 0:
        raise ContractViolation(f"learning rate must be >= 0, got {lr}")
    for p in params:
        if p.frozen:
            continue
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != param shape {p.data.shape} for {p.name!r}"
            )
        p.data -= lr * g


class ParamStore:
    """Ordered collection of uniquely named parameters with checkpoint IO.

    Checkpoint layout: a directory with manifest.json (names, dims, frozen
    flags) and one T1 tensor file per parameter.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, data, frozen: bool = False) -> Param:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        p = Param(name, data, frozen)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def total_size(self) -> int:
        return sum(p.data.size for p in self)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "params": [
                {"name": p.name, "dims": list(p.data.shape), "frozen": p.frozen}
                for p in self
            ]
        }
        (directory / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
        for i, p in enumerate(self):
            tensorio.write_tensor(directory / f"param_{i:04d}.t1", p.data)

    def load(self, directory) -> None:
        """Load values into existing parameters; names and dims must match."""
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no checkpoint manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        entries = manifest["params"]
        if [e["name"] for e in entries] != self.names():
            raise DataError("checkpoint parameter names do not match this model")
        for i, (entry, p) in enumerate(zip(entries, self)):
            data = tensorio.read_tensor(directory / f"param_{i:04d}.t1")
            if list(data.shape) != entry["dims"] or data.shape != p.data.shape:
                raise DataError(f"checkpoint dims mismatch for {p.name!r}")
            p.data = data
