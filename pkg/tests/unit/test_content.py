#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

import logging

import pytest

from vnetsim.content import (
    build_tree,
    flat_verify,
    generate_corpus,
    mutate_corpus,
    resolve_master,
    single_change_cost,
    verify,
)
from vnetsim.helpers import DEFAULT_HASH
from vnetsim.models import ComponentKind, EmptyNodeSetError

logger = logging.getLogger(__name__)


@pytest.fixture()
def small_corpus():
    """Two objects of two components of two files."""
    return generate_corpus(objects=2, components_per_object=2, files_per_component=2, seed=3)


def test_identical_content_gives_identical_roots(small_corpus) -> None:
    # When
    first, second = build_tree("user", small_corpus), build_tree("user", small_corpus)

    # Then
    assert first.inventory_hash == second.inventory_hash
    assert first.file_count == 8


def test_one_flipped_byte_changes_the_root(small_corpus) -> None:
    # When
    mutated, picked = mutate_corpus(small_corpus, 1, seed=1)

    # Then
    assert len(picked) == 1
    assert build_tree("user", mutated).inventory_hash != build_tree("user", small_corpus).inventory_hash


def test_empty_inventory_hashes_no_children() -> None:
    # When
    tree = build_tree("user", {})

    # Then
    assert tree.inventory_hash == DEFAULT_HASH.empty()
    assert tree.file_count == 0


def test_identical_trees_cost_one_comparison(small_corpus) -> None:
    # Given
    tree = build_tree("user", small_corpus)

    # When
    result = verify(tree, tree)

    # Then
    assert result.changed == frozenset()
    assert result.comparisons == 1


def test_single_change_descends_one_path(small_corpus) -> None:
    # Given
    mutated, picked = mutate_corpus(small_corpus, 1, seed=5)
    local = build_tree("user", small_corpus)

    # When
    result = verify(local, build_tree("user", mutated))

    # Then
    assert result.changed == picked
    assert result.comparisons == 7
    assert single_change_cost(local, next(iter(picked))) == 7


def test_missing_object_is_reported_whole(small_corpus) -> None:
    # Given
    trimmed = {k: v for k, v in small_corpus.items() if k != "o0001"}

    # When
    result = verify(build_tree("user", small_corpus), build_tree("user", trimmed))

    # Then
    assert {path[0] for path in result.changed} == {"o0001"}
    assert len(result.changed) == 4
    assert result.comparisons == 2


def test_flat_verify_compares_every_file() -> None:
    # Given
    files = {("o", "c", f"f{i}"): bytes([i]) for i in range(8)}

    # When
    same = flat_verify(files, dict(files))
    changed = flat_verify(files, {**files, ("o", "c", "f0"): b"\xff"})

    # Then
    assert (same.changed, same.comparisons) == (frozenset(), 8)
    assert changed.changed == {("o", "c", "f0")}


def test_merkle_matches_flat_and_compares_less() -> None:
    # Given
    content = generate_corpus(objects=20, components_per_object=5, files_per_component=5, seed=0)
    local = build_tree("user", content)

    for changes in (1, 2, 5, 10):
        mutated, picked = mutate_corpus(content, changes, seed=changes)
        remote = build_tree("user", mutated)

        # When
        merkle = verify(local, remote)
        flat = flat_verify(dict(local.files()), dict(remote.files()))

        # Then
        assert merkle.changed == flat.changed == picked
        assert merkle.comparisons < flat.comparisons


def test_component_kinds_are_kept(small_corpus) -> None:
    # When
    tree = build_tree("user", small_corpus)

    # Then
    for obj in tree.objects:
        for component in obj.components:
            assert component.kind == small_corpus[obj.object_id][component.component_id][0]
            assert isinstance(component.kind, ComponentKind)


@pytest.mark.parametrize(
    "file_id,nodes,master",
    [(48, [10, 50, 90], 50), (90, [10, 50, 90], 90), (50, [60, 40], 40)],
)
def test_resolve_master(file_id: int, nodes: list[int], master: int) -> None:
    assert resolve_master(file_id, nodes) == master


def test_resolve_master_on_hash_ids() -> None:
    assert resolve_master(b"\x00\x30", [b"\x00\x10", b"\x00\x32"]) == b"\x00\x32"


def test_resolve_master_without_nodes() -> None:
    with pytest.raises(EmptyNodeSetError):
        resolve_master(1, [])
