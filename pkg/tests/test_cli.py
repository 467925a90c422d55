import json

import numpy as np
import pytest

from speechsae import analysis, ingest, sae
from speechsae.cli import main, parse_latents, read_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def pipeline(root, capsys):
    """synth -> ingest -> train -> index, all through the CLI."""
    steps = [
        ("synth", "--d-in", 16, "--atoms", 48, "--sparsity", 3, "--files", 20, "--frames-per-file", 120,
         "--word-atoms", 3, "--language-atom", 47, "--foreign-fraction", 0.4, "--pad-to", 160,
         "--seed", 7, "--out", root / "raw"),
        ("ingest", "--manifest", root / "raw" / "manifest.jsonl", "--out", root / "store"),
        ("train", "--store", root / "store", "--d-latent", 64, "--k", 3, "--steps", 150, "--lr", 1e-3,
         "--batch-size", 64, "--shuffle-buffer", 1024, "--log-every", 50, "--out", root / "model" / "m.llsa"),
        ("index", "--store", root / "store", "--model", root / "model" / "m.llsa", "--out", root / "model" / "idx.lli"),
    ]
    for argv in steps:
        code, out, err = run(capsys, *argv)
        assert code == 0, (argv[0], err)
    return root


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for argv in [
        ["synth", "--d-in", "16", "--atoms", "48", "--sparsity", "3", "--files", "20", "--frames-per-file", "120",
         "--word-atoms", "3", "--language-atom", "47", "--foreign-fraction", "0.4", "--pad-to", "160",
         "--seed", "7", "--out", str(root / "raw")],
        ["ingest", "--manifest", str(root / "raw" / "manifest.jsonl"), "--out", str(root / "store")],
        ["train", "--store", str(root / "store"), "--d-latent", "64", "--k", "3", "--steps", "150", "--lr", "1e-3",
         "--batch-size", "64", "--shuffle-buffer", "1024", "--log-every", "50", "--out", str(root / "model" / "m.llsa")],
        ["index", "--store", str(root / "store"), "--model", str(root / "model" / "m.llsa"),
         "--out", str(root / "model" / "idx.lli")],
    ]:
        assert main(argv) == 0, argv[0]
    return root


def strongest_latent(root):
    idx = analysis.load_index(root / "model" / "idx.lli")
    return int(np.argmax(idx.latent_counts())), idx


def test_unknown_subcommand_and_missing_options(capsys, tmp_path):
    assert run(capsys, "frobnicate")[0] == 2
    code, _, err = run(capsys, "train", "--store", tmp_path)
    assert code == 2
    msg = json.loads(err.strip().splitlines()[-1])
    assert msg["error"] == "usage" and "--out" in msg["message"]
    code, _, err = run(capsys, "steer", "--model", "m", "--latent", 1, "--mode", "set", "--out", "o")
    assert code == 2 and "--in" in err


def test_runtime_error_is_exit_one_with_json(capsys, tmp_path):
    bad = tmp_path / "m.llsa"
    bad.write_bytes(b"NOPE" + bytes(40))
    code, _, err = run(capsys, "index", "--store", tmp_path / "nostore", "--model", bad, "--out", tmp_path / "i")
    assert code == 1
    assert "error" in json.loads(err.strip().splitlines()[-1])


def test_config_fills_and_flag_wins(capsys, built, tmp_path):
    latent, idx = strongest_latent(built)
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"# analysis options\nindex = {built / 'model' / 'idx.lli'}\nlatent = {latent}\n"
                   "feature = lang:non-en\nstore = " + str(built / "store") + "\n")
    code, out, err = run(capsys, "analyze", "pr", "--config", cfg)
    assert code == 0 and err == ""
    base = json.loads(out)
    assert base["latent"] == latent
    other = (latent + 1) % idx.d_latent
    code, out, err = run(capsys, "analyze", "pr", "--config", cfg, "--latent", other)
    assert code == 0
    assert "overrides config" in err
    assert json.loads(out)["latent"] == other


def test_read_config_rejects_garbage(tmp_path):
    p = tmp_path / "c"
    p.write_text("steps = 3\nno equals sign\n")
    with pytest.raises(Exception, match="key=value"):
        read_config(p)
    p.write_text("batch-size = 8\n")
    assert read_config(p) == {"batch_size": "8"}


def test_parse_latents_ranges(built):
    _, idx = strongest_latent(built)
    assert parse_latents("0-3,7,2", idx.d_latent, idx) == [0, 1, 2, 3, 7]
    with pytest.raises(Exception):
        parse_latents("60-70", idx.d_latent, idx)
    assert parse_latents(None, idx.d_latent, idx) == np.flatnonzero(idx.latent_counts()).tolist()


def test_train_outputs_and_manifest(built):
    m = json.loads((built / "model" / "MANIFEST.json").read_text())
    assert {"m.llsa", "m.llsa.stats.jsonl", "idx.lli", "idx.lli.json"} <= set(m)
    stats = [json.loads(l) for l in (built / "model" / "m.llsa.stats.jsonl").read_text().splitlines()]
    assert [s["step"] for s in stats] == [50, 100, 150]
    params, k = sae.load_checkpoint(built / "model" / "m.llsa")
    assert k == 3 and params.w_dec.shape == (16, 64)


def test_report_top_five_ordered_by_strength(capsys, built, tmp_path):
    latent, idx = strongest_latent(built)
    out = tmp_path / "rep"
    code, stdout, _ = run(capsys, "report", "--store", built / "store", "--index", built / "model" / "idx.lli",
                          "--latent", latent, "--top", 5, "--out", out)
    assert code == 0 and json.loads(stdout)["docs"] == 5
    docs = sorted(out.glob("*.html"))
    assert len(docs) == 5
    strength = {}
    for p in idx.postings_for(latent):
        fid = idx.files[int(p["file"])]
        strength[fid] = max(strength.get(fid, 0.0), float(p["value"]))
    fids = [d.stem.split("_", 2)[2] for d in docs]
    vals = [strength[f] for f in fids]
    assert vals == sorted(vals, reverse=True)
    assert vals[0] == max(strength.values())
    assert set(json.loads((out / "MANIFEST.json").read_text())) == {d.name for d in docs}


def test_rerun_is_reproducible(capsys, tmp_path):
    a, b = pipeline(tmp_path / "a", capsys), pipeline(tmp_path / "b", capsys)
    for sub in ("raw", "store", "model"):
        ma = json.loads((a / sub / "MANIFEST.json").read_text())
        mb = json.loads((b / sub / "MANIFEST.json").read_text())
        assert ma == mb
    assert (a / "model" / "idx.lli").read_bytes() == (b / "model" / "idx.lli").read_bytes()


def test_end_to_end_downstream_commands(capsys, built, tmp_path):
    latent, idx = strongest_latent(built)
    store, index, model = built / "store", built / "model" / "idx.lli", built / "model" / "m.llsa"

    code, out, _ = run(capsys, "analyze", "positional", "--index", index, "--latent", latent)
    rec = json.loads(out)
    assert code == 0 and rec["n"] > 0 and 0 <= rec["mean_time"] <= 160 / 50

    code, out, _ = run(capsys, "analyze", "top-units", "--store", store, "--index", index, "--latent", latent,
                       "--min-occurrences", 1, "--out", tmp_path / "tu.json")
    assert code == 0 and json.loads((tmp_path / "tu.json").read_text()) == json.loads(out)

    code, out, _ = run(capsys, "analyze", "pr", "--store", store, "--index", index, "--latent", latent,
                       "--feature", "word:the", "--span-level")
    rec = json.loads(out)
    assert code == 0 and {"strict", "lenient"} <= set(rec)

    code, out, _ = run(capsys, "analyze", "confusion", "--store", store, "--index", index, "--latent", latent,
                       "--positive-tag", "word:the")
    assert code == 0
    cm = json.loads(out)
    assert sum(cm["counts"].values()) == len(idx.files)

    src = store / "emb" / f"{idx.files[0]}.lle"
    code, out, _ = run(capsys, "steer", "--model", model, "--in", src, "--latent", latent, "--mode", "deactivate", "--magnitude", 0,
                       "--out", tmp_path / "steer" / "s.lle")
    assert code == 0
    steered = ingest.load_embedding_file(tmp_path / "steer" / "s.lle")
    assert steered.n_frames == ingest.load_embedding_file(src).n_frames

    code, out, _ = run(capsys, "steer", "--model", model, "--in", src, "--latent", latent, "--mode", "activate",
                       "--index", index, "--out", tmp_path / "steer" / "t.lle")
    assert code == 0 and json.loads(out)["magnitude"] > 0

    code, out, _ = run(capsys, "label", "--store", store, "--index", index, "--latents", f"0-9,{latent}",
                       "--mock", "builtin", "--csv", tmp_path / "lab" / "labels.csv", "--out", tmp_path / "lab" / "labels.jsonl")
    assert code == 0
    first = (tmp_path / "lab" / "labels.jsonl").read_bytes()
    run(capsys, "label", "--store", store, "--index", index, "--latents", f"0-9,{latent}", "--mock", "builtin",
        "--workers", 1, "--out", tmp_path / "lab" / "labels.jsonl")
    assert (tmp_path / "lab" / "labels.jsonl").read_bytes() == first

    code, out, _ = run(capsys, "score", "--model", model, "--dict", built / "raw" / "dict.bin")
    rec = json.loads(out)
    assert code == 0 and 0.0 <= rec["matched_fraction"] <= 1.0 and rec["threshold"] == 0.9
