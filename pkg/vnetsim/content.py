#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Content addressing: inventory Merkle trees, integrity checks and master node lookup.

An inventory holds objects, an object holds components and a component holds
files. Every file is identified by the hash of its bytes; every inner node by the
hash of its children's hashes, concatenated in hash order.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Optional

import numpy as np

from .helpers import DEFAULT_HASH, HashProvider
from .models import ComponentKind, EmptyNodeSetError

logger = logging.getLogger(__name__)

# (object id, component id, file name)
FilePath = tuple[str, str, str]
ComponentContent = tuple[ComponentKind, Mapping[str, bytes]]
InventoryContent = Mapping[str, Mapping[str, ComponentContent]]


@dataclass(frozen=True)
class FileNode:
    name: str
    file_id: bytes


@dataclass(frozen=True)
class ComponentNode:
    component_id: str
    kind: ComponentKind
    files: tuple[FileNode, ...]
    hash: bytes

    def file(self, name: str) -> Optional[FileNode]:
        return next((f for f in self.files if f.name == name), None)


@dataclass(frozen=True)
class ObjectNode:
    object_id: str
    components: tuple[ComponentNode, ...]
    hash: bytes

    def component(self, component_id: str) -> Optional[ComponentNode]:
        return next((c for c in self.components if c.component_id == component_id), None)


@dataclass(frozen=True)
class ContentTree:
    """Merkle tree over one user's inventory."""

    inventory_id: bytes
    objects: tuple[ObjectNode, ...]
    inventory_hash: bytes

    def object(self, object_id: str) -> Optional[ObjectNode]:
        return next((o for o in self.objects if o.object_id == object_id), None)

    def files(self) -> Iterator[tuple[FilePath, bytes]]:
        for obj in self.objects:
            for component in obj.components:
                for node in component.files:
                    yield (obj.object_id, component.component_id, node.name), node.file_id

    @property
    def file_count(self) -> int:
        return sum(len(c.files) for o in self.objects for c in o.components)


@dataclass(frozen=True)
class VerifyResult:
    changed: frozenset[FilePath]
    comparisons: int


def _combine(hasher: HashProvider, children: Iterable[bytes]) -> bytes:
    return hasher.digest_many(sorted(children))


def build_tree(
    user_id: str, content: InventoryContent, hasher: HashProvider = DEFAULT_HASH
) -> ContentTree:
    """Builds the tree bottom-up. An empty inventory gets the hash of no children."""
    objects = []
    for object_id, components in content.items():
        component_nodes = []
        for component_id, (kind, files) in components.items():
            file_nodes = tuple(
                sorted(
                    (FileNode(name, hasher.digest(data)) for name, data in files.items()),
                    key=lambda f: (f.file_id, f.name),
                )
            )
            component_nodes.append(
                ComponentNode(
                    component_id,
                    ComponentKind(kind),
                    file_nodes,
                    _combine(hasher, (f.file_id for f in file_nodes)),
                )
            )
        component_nodes.sort(key=lambda c: (c.hash, c.component_id))
        objects.append(
            ObjectNode(
                object_id,
                tuple(component_nodes),
                _combine(hasher, (c.hash for c in component_nodes)),
            )
        )
    objects.sort(key=lambda o: (o.hash, o.object_id))

    return ContentTree(
        inventory_id=hasher.digest(user_id.encode()),
        objects=tuple(objects),
        inventory_hash=_combine(hasher, (o.hash for o in objects)),
    )


def _component_files(object_id: str, component: ComponentNode) -> set[FilePath]:
    return {(object_id, component.component_id, f.name) for f in component.files}


def _object_files(obj: ObjectNode) -> set[FilePath]:
    files: set[FilePath] = set()
    for component in obj.components:
        files |= _component_files(obj.object_id, component)
    return files


def verify(local: ContentTree, remote: ContentTree) -> VerifyResult:
    """Top-down comparison that only descends into mismatching branches.

    A subtree present on one side only is reported whole, without comparisons.
    """
    comparisons = 1
    if local.inventory_hash == remote.inventory_hash:
        return VerifyResult(frozenset(), comparisons)

    changed: set[FilePath] = set()
    local_objects = {o.object_id: o for o in local.objects}
    remote_objects = {o.object_id: o for o in remote.objects}
    for object_id in sorted(local_objects.keys() | remote_objects.keys()):
        mine, theirs = local_objects.get(object_id), remote_objects.get(object_id)
        if mine is None or theirs is None:
            changed |= _object_files(mine or theirs)  # type: ignore[arg-type]
            continue

        comparisons += 1
        if mine.hash == theirs.hash:
            continue

        my_components = {c.component_id: c for c in mine.components}
        their_components = {c.component_id: c for c in theirs.components}
        for component_id in sorted(my_components.keys() | their_components.keys()):
            a, b = my_components.get(component_id), their_components.get(component_id)
            if a is None or b is None:
                changed |= _component_files(object_id, a or b)  # type: ignore[arg-type]
                continue

            comparisons += 1
            if a.hash == b.hash:
                continue

            my_files = {f.name: f.file_id for f in a.files}
            their_files = {f.name: f.file_id for f in b.files}
            for name in sorted(my_files.keys() | their_files.keys()):
                if name not in my_files or name not in their_files:
                    changed.add((object_id, component_id, name))
                    continue

                comparisons += 1
                if my_files[name] != their_files[name]:
                    changed.add((object_id, component_id, name))

    return VerifyResult(frozenset(changed), comparisons)


def flat_verify(local: Mapping[FilePath, bytes], remote: Mapping[FilePath, bytes]) -> VerifyResult:
    """Exhaustive file-by-file comparison."""
    paths = local.keys() | remote.keys()
    changed = frozenset(p for p in paths if local.get(p) != remote.get(p))
    return VerifyResult(changed, len(paths))


def single_change_cost(tree: ContentTree, path: FilePath) -> int:
    """Comparisons `verify` performs when exactly the file at `path` changed."""
    obj = tree.object(path[0])
    if obj is None:
        raise KeyError(path[0])

    component = obj.component(path[1])
    if component is None:
        raise KeyError(path[1])

    return 1 + len(tree.objects) + len(obj.components) + len(component.files)


def _as_int(identifier: int | bytes) -> int:
    return int.from_bytes(identifier, "big") if isinstance(identifier, bytes) else identifier


def resolve_master(file_id: int | bytes, node_ids: Iterable[int | bytes]) -> int | bytes:
    """Node whose id is closest to `file_id`; ties go to the smaller id."""
    nodes = list(node_ids)
    if not nodes:
        raise EmptyNodeSetError("cannot resolve a master node without nodes")

    target = _as_int(file_id)
    return min(nodes, key=lambda n: (abs(_as_int(n) - target), _as_int(n)))


def generate_corpus(
    objects: int = 200,
    components_per_object: int = 5,
    files_per_component: int = 5,
    seed: int = 0,
    file_size: int = 64,
) -> dict[str, dict[str, ComponentContent]]:
    """Random inventory with the requested shape."""
    rng = np.random.default_rng(seed)
    kinds = list(ComponentKind)
    content: dict[str, dict[str, ComponentContent]] = {}
    for o in range(objects):
        components: dict[str, ComponentContent] = {}
        for c in range(components_per_object):
            files = {f"f{f:03d}": rng.bytes(file_size) for f in range(files_per_component)}
            components[f"c{c:03d}"] = (kinds[int(rng.integers(len(kinds)))], files)
        content[f"o{o:04d}"] = components
    return content


def mutate_corpus(
    content: InventoryContent, changes: int, seed: int = 0
) -> tuple[dict[str, dict[str, ComponentContent]], frozenset[FilePath]]:
    """Copy of `content` with one byte flipped in `changes` distinct files."""
    paths = [
        (o, c, f) for o, comps in content.items() for c, (_, files) in comps.items() for f in files
    ]
    if changes > len(paths):
        raise ValueError(f"cannot change {changes} of {len(paths)} files")

    rng = np.random.default_rng(seed)
    picked = {paths[int(i)] for i in rng.choice(len(paths), size=changes, replace=False)}

    mutated: dict[str, dict[str, ComponentContent]] = {}
    for o, comps in content.items():
        mutated[o] = {}
        for c, (kind, files) in comps.items():
            new_files = dict(files)
            for name in files:
                if (o, c, name) in picked:
                    data = bytearray(new_files[name])
                    position = int(rng.integers(len(data))) if data else 0
                    if data:
                        data[position] ^= 0xFF
                    else:
                        data.append(1)
                    new_files[name] = bytes(data)
            mutated[o][c] = (kind, new_files)

    return mutated, frozenset(picked)
