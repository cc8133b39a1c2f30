"""Voronoi cells of a reference measure and the Voronoi losses L1-L5.

Fitted atom i joins the cell of the reference atom j closest in
theta = (A, b, eta) (the gating bias c is excluded); ties go to the lowest
reference index.  Matrix norms are Frobenius.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import ContractError, ScoreKind


class CellKind(str, enum.Enum):
    EMPTY = "empty"
    EXACT = "exact"
    OVER = "over"


@dataclass(frozen=True)
class VoronoiAssignment:
    cell_of: tuple  # fitted index -> reference index
    cells: tuple  # reference index -> tuple of fitted indices
    classification: tuple  # reference index -> CellKind

    @property
    def n_over(self):
        return sum(k is CellKind.OVER for k in self.classification)

    def with_over_cells(self, over):
        """Same cells, but classified OVER exactly for the given reference indices.

        Used for the theory-aligned classification where the over-specified
        atoms are fixed a priori instead of read off cell sizes.
        """
        over = set(over)
        cls = []
        for j, members in enumerate(self.cells):
            if not members:
                cls.append(CellKind.EMPTY)
            else:
                cls.append(CellKind.OVER if j in over else CellKind.EXACT)
        return VoronoiAssignment(self.cell_of, self.cells, tuple(cls))

    def to_dict(self):
        return {"cell_of": list(self.cell_of), "cells": [list(c) for c in self.cells],
                "classification": [k.value for k in self.classification]}


@dataclass(frozen=True)
class LossReport:
    kind: str
    value: float
    per_cell_terms: tuple
    r: float = 1.0

    def to_dict(self):
        return {"kind": self.kind, "value": self.value, "per_cell_terms": list(self.per_cell_terms),
                "r": self.r}


def _theta(G):
    k = G.n_atoms
    return np.concatenate([G.A.reshape(k, -1), G.b, G.eta], axis=1)


def _check_compatible(fitted, reference):
    if (fitted.d, fitted.expert.q, fitted.score) != (reference.d, reference.expert.q, reference.score):
        raise ContractError("fitted and reference measures differ in d, q or score kind")
    if fitted.expert.family != reference.expert.family:
        raise ContractError("fitted and reference measures use different expert families")


def assign_cells(fitted, reference):
    if fitted.n_atoms == 0:
        raise ContractError("empty fitted measure")
    _check_compatible(fitted, reference)
    t, ts = _theta(fitted), _theta(reference)
    dist = np.sqrt(((t[:, None, :] - ts[None, :, :]) ** 2).sum(axis=2))
    cell_of = tuple(int(j) for j in np.argmin(dist, axis=1))
    cells = tuple(tuple(i for i, j in enumerate(cell_of) if j == ref) for ref in range(reference.n_atoms))
    cls = tuple(
        CellKind.EMPTY if not m else CellKind.EXACT if len(m) == 1 else CellKind.OVER for m in cells
    )
    return VoronoiAssignment(cell_of, cells, cls)


def _deltas(fitted, reference, i, j):
    dA = np.linalg.norm(fitted.A[i] - reference.A[j])
    db = np.linalg.norm(fitted.b[i] - reference.b[j])
    dc = abs(fitted.c[i] - reference.c[j])
    deta = np.linalg.norm(fitted.eta[i] - reference.eta[j])
    return dA, db, dc, deta


def loss_sparse(fitted, reference, assignment=None):
    """L1 (fully quadratic) or L4 (partially quadratic, no b terms)."""
    _check_compatible(fitted, reference)
    assignment = assignment or assign_cells(fitted, reference)
    terms = []
    for j, members in enumerate(assignment.cells):
        kind = assignment.classification[j]
        if kind is CellKind.EMPTY:
            terms.append(0.0)
        elif kind is CellKind.OVER:
            t = abs(sum(expit(fitted.c[i]) for i in members) - expit(reference.c[j]))
            for i in members:
                dA, db, _, deta = _deltas(fitted, reference, i, j)
                t += dA ** 2 + db ** 2 + deta ** 2
            terms.append(float(t))
        else:
            terms.append(float(sum(sum(_deltas(fitted, reference, i, j)) for i in members)))
    kind = "l1" if reference.score is ScoreKind.FULL else "l4"
    return LossReport(kind, float(sum(terms)), tuple(terms))


def loss_minimax_r(fitted, reference, assignment=None, r=1.0):
    """L2,r for polynomial experts: every parameter discrepancy raised to r.

    The expert block is split into ||d alpha||^r + |d beta|^r; the gating
    weight-sum term of over-specified cells enters at first power.
    """
    if r < 1:
        raise ContractError("r must be at least 1")
    if not reference.expert.is_polynomial:
        raise ContractError("L2,r is defined for linear/polynomial experts only")
    _check_compatible(fitted, reference)
    assignment = assignment or assign_cells(fitted, reference)
    d = reference.d
    terms = []
    for j, members in enumerate(assignment.cells):
        kind = assignment.classification[j]
        if kind is CellKind.EMPTY:
            terms.append(0.0)
            continue
        t = 0.0
        if kind is CellKind.OVER:
            t += abs(sum(expit(fitted.c[i]) for i in members) - expit(reference.c[j]))
        for i in members:
            dA = np.linalg.norm(fitted.A[i] - reference.A[j])
            db = np.linalg.norm(fitted.b[i] - reference.b[j])
            dalpha = np.linalg.norm(fitted.eta[i, :d] - reference.eta[j, :d])
            dbeta = abs(fitted.eta[i, d] - reference.eta[j, d])
            t += dA ** r + db ** r + dalpha ** r + dbeta ** r
            if kind is CellKind.EXACT:
                t += abs(fitted.c[i] - reference.c[j]) ** r
        terms.append(float(t))
    return LossReport("l2r", float(sum(terms)), tuple(terms), float(r))


def loss_dense(fitted, reference, assignment=None):
    """L3 (fully quadratic) or L5 (partially quadratic): first-power sums over all cells."""
    _check_compatible(fitted, reference)
    assignment = assignment or assign_cells(fitted, reference)
    terms = [
        float(sum(sum(_deltas(fitted, reference, i, j)) for i in members))
        for j, members in enumerate(assignment.cells)
    ]
    kind = "l3" if reference.score is ScoreKind.FULL else "l5"
    return LossReport(kind, float(sum(terms)), tuple(terms))


LOSS_KINDS = ("l1", "l2r", "l3", "l4", "l5")


def compute_loss(kind, fitted, reference, r=1.0, assignment=None):
    """Dispatch by loss name; l1/l3 need the fully quadratic score, l4/l5 the partial one."""
    kind = kind.lower()
    if kind not in LOSS_KINDS:
        raise ContractError(f"unknown loss kind {kind!r}")
    full = reference.score is ScoreKind.FULL
    if kind in ("l1", "l3") and not full:
        raise ContractError(f"{kind} needs the fully quadratic score; use l{int(kind[1]) + 3}")
    if kind in ("l4", "l5") and full:
        raise ContractError(f"{kind} needs the partially quadratic score; use l{int(kind[1]) - 3}")
    if kind in ("l1", "l4"):
        return loss_sparse(fitted, reference, assignment)
    if kind in ("l3", "l5"):
        return loss_dense(fitted, reference, assignment)
    return loss_minimax_r(fitted, reference, assignment, r)
