"""Generated Java-like corpora with known answers.

``fc_corpus`` builds files in which every summarised accessor ends with a
domain word ("... of this flight") that never occurs in the accessor itself
but does occur in exactly one other method of the same file, the
*informative* method.  A model can only get that word right by reading the
file context.  ``overfit_corpus`` is a small memorisation set that includes
a flight-booking setter together with the twelve other methods of its file.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import RawMethod

DOMAINS = ("flight", "song", "invoice", "patient", "account", "vehicle", "recipe", "player")
DOMAIN_PARTS = {
    "flight": ("id", "number"), "song": ("title", "length"), "invoice": ("total", "number"),
    "patient": ("record", "age"), "account": ("balance", "owner"), "vehicle": ("plate", "speed"),
    "recipe": ("steps", "servings"), "player": ("score", "rank"),
}
FIELDS = ("name", "value", "count", "status", "date", "code", "label", "size",
          "level", "color", "weight", "mode", "price", "note", "kind", "source")
TYPES = ("String", "int", "long", "boolean")


def _cap(word: str) -> str:
    return word[0].upper() + word[1:]


def _leaf(label: str, value: str) -> dict:
    return {"label": label, "value": value, "children": []}


def accessor_source(kind: str, field: str, jtype: str) -> str:
    if kind == "set":
        return f"public void set{_cap(field)}({jtype} {field}) {{ this.{field} = {field}; }}"
    return f"public {jtype} get{_cap(field)}() {{ return {field}; }}"


def accessor_ast(kind: str, field: str, jtype: str) -> dict:
    """AST with node types; identifier leaves carry their names."""
    name = _leaf("SimpleName", f"{kind}{_cap(field)}")
    if kind == "set":
        body = {"label": "Block", "children": [
            {"label": "ExpressionStatement", "children": [
                {"label": "Assignment", "children": [
                    {"label": "FieldAccess", "children": [
                        {"label": "ThisExpression", "children": []}, _leaf("SimpleName", field)]},
                    _leaf("NameExpr", field)]}]}]}
        return {"label": "MethodDeclaration", "children": [
            _leaf("Modifier", "public"), _leaf("Type", "void"), name,
            {"label": "Parameter", "children": [_leaf("Type", jtype), _leaf("SimpleName", field)]},
            body]}
    body = {"label": "Block", "children": [
        {"label": "ReturnStatement", "children": [_leaf("NameExpr", field)]}]}
    return {"label": "MethodDeclaration", "children": [
        _leaf("Modifier", "public"), _leaf("Type", jtype), name, body]}


def accessor_summary(kind: str, field: str, domain: str) -> str:
    verb = "sets" if kind == "set" else "returns"
    return f"{verb} the {field} of this {domain}"


def informative_source(domain: str, rng: np.random.Generator) -> str:
    part = DOMAIN_PARTS[domain][int(rng.integers(2))]
    name = f"{domain}{_cap(part)}"
    if rng.integers(2):
        return f"public long get{_cap(name)}() {{ return {name}; }}"
    return f"public void set{_cap(name)}(long {name}) {{ this.{name} = {name}; }}"


@dataclass
class PlantedFile:
    file_id: str
    domain: str
    informative_id: str
    methods: list[RawMethod]


def fc_corpus(num_files: int, seed: int, methods_per_file: tuple[int, int] = (3, 5),
              domains: tuple[str, ...] = DOMAINS, prefix: str = "f") -> list[PlantedFile]:
    """Files of accessors whose summaries end in a word found only in file context."""
    rng = np.random.Generator(np.random.PCG64(seed))
    files = []
    for fi in range(num_files):
        fid = f"{prefix}{fi:04d}"
        domain = domains[int(rng.integers(len(domains)))]
        k = int(rng.integers(methods_per_file[0], methods_per_file[1] + 1))
        fields = rng.choice(len(FIELDS), size=k, replace=False)
        methods = []
        for j, f in enumerate(fields):
            kind = "set" if rng.integers(2) else "get"
            field = FIELDS[int(f)]
            jtype = TYPES[int(rng.integers(len(TYPES)))]
            methods.append(RawMethod(
                id=f"{fid}.m{j}", file_id=fid, source=accessor_source(kind, field, jtype),
                ast=accessor_ast(kind, field, jtype), summary=accessor_summary(kind, field, domain)))
        info = RawMethod(id=f"{fid}.info", file_id=fid, source=informative_source(domain, rng))
        methods.insert(int(rng.integers(k + 1)), info)
        files.append(PlantedFile(fid, domain, info.id, methods))
    return files


def flatten(files: list[PlantedFile]) -> list[RawMethod]:
    return [m for f in files for m in f.methods]


def informative_row(planted: PlantedFile, target_id: str) -> int:
    """Row index of the informative method in ``target_id``'s context matrix."""
    others = [m.id for m in planted.methods if m.id != target_id]
    return others.index(planted.informative_id)


# ---------------------------------------------------------------------------
# a flight-booking file

FLIGHT_TARGET = RawMethod(
    id="airline.setIntermediate", file_id="airline",
    source="public void setIntermediate(String intermediate) { this.intermediate = intermediate; }",
    ast=accessor_ast("set", "intermediate", "String"),
    summary="sets the intermediate value for this flight",
)

FLIGHT_CONTEXT = (
    "public void setAirlineName(java.lang.String airlineName) { this.airlineName = airlineName; }",
    "public void setDestination(java.lang.String destination) { this.destination = destination; }",
    "public long getFlightId() { return flightId; }",
    "public void setFlightId(long flightId) { this.flightId = flightId; }",
    "public void setFlightNumber(java.lang.String flightNumber) { this.flightNumber = flightNumber; }",
    "public void setIntermediate(java.lang.String intermediate) { this.intermediate = intermediate; }",
    "public void setIntermediateArrivalTime(java.lang.String intermediateArrivalTime) "
    "{ this.intermediateArrivalTime = intermediateArrivalTime; }",
    "public void setIntermediateDepartureTime(java.lang.String intermediateDepartureTime) "
    "{ this.intermediateDepartureTime = intermediateDepartureTime; }",
    "public int getNumAvailableSeats() { return numAvailableSeats; }",
    "public void setNumAvailableSeats(int numAvailableSeats) { this.numAvailableSeats = numAvailableSeats; }",
    "public int getNumSeats() { return numSeats; }",
    "public void setNumSeats(int numSeats) { this.numSeats = numSeats; }",
)


def flight_file() -> list[RawMethod]:
    """The flight file: twelve context methods in listing order, then the target."""
    ctx = [RawMethod(id=f"airline.ctx{i + 1:02d}", file_id="airline", source=src)
           for i, src in enumerate(FLIGHT_CONTEXT)]
    return ctx + [FLIGHT_TARGET]


def overfit_corpus(num_methods: int = 32, seed: int = 0) -> list[RawMethod]:
    """``num_methods`` summarised methods: the flight setter plus generated accessors."""
    methods = flight_file()
    planted = fc_corpus(num_files=num_methods, seed=seed, methods_per_file=(1, 1), prefix="o")
    extra = [m for f in planted for m in f.methods]
    targets = [m for m in extra if m.summary][: num_methods - 1]
    keep = {m.file_id for m in targets}
    return methods + [m for m in extra if m.file_id in keep]
