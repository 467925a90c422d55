import json

import numpy as np
import pytest

from speechsae import ingest, sae, synthbench
from helpers import random_params


@pytest.fixture
def params_factory():
    return random_params


@pytest.fixture(scope="session")
def word_corpus():
    """Small planted corpus with word-locked atoms and Spanish-tagged files."""
    d = synthbench.make_dictionary(d_in=16, n_atoms=48, sparsity=3, seed=7)
    return synthbench.generate(
        d, n_files=24, frames_per_file=150, n_word_atoms=3, language_atom=47, foreign_fraction=0.4
    )


@pytest.fixture(scope="session")
def word_store(word_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("word")
    synthbench.write_corpus(word_corpus, root / "raw", pad_to=200)
    return ingest.ingest_corpus(root / "raw" / "manifest.jsonl", root / "store")


@pytest.fixture(scope="session")
def planted_params(word_corpus):
    """The generating dictionary used as an SAE: decoder = atoms, encoder = atoms^T."""
    atoms = word_corpus.dictionary.atoms
    d_in, n = atoms.shape
    return sae.SaeParams(
        atoms.T.copy(),
        np.zeros(n, np.float32),
        atoms.copy(),
        np.zeros(d_in, np.float32),
    )


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    rows = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            for key, value in getattr(rep, "user_properties", ()):
                if key == "acceptance":
                    rows.append(json.loads(value))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for r in sorted(rows, key=lambda r: r["n"]):
        terminalreporter.write_line(f"[{'PASS' if r['ok'] else 'FAIL'}] {r['n']:2d} {r['title']}: {r['detail']}")
