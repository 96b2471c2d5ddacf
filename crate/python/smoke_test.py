"""Smoke test for the persona_probe extension module.

Builds the extension and the CLI with cargo, imports the freshly built
library, and runs scoring, parsing, fitting, probing and toy steering.

    python3 python/smoke_test.py
"""

import atexit
import json
import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build():
    subprocess.run(
        [
            "cargo", "build",
            "-p", "persona-probe-py", "-p", "persona-probe-cli",
            "--features", "persona-probe-py/extension-module",
        ],
        cwd=ROOT,
        check=True,
    )
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "debug"
    lib = next(p for p in (target / "libpersona_probe.so", target / "libpersona_probe.dylib") if p.exists())
    out = Path(tempfile.mkdtemp(prefix="persona_probe_py_"))
    atexit.register(shutil.rmtree, out, True)
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy(lib, out / f"persona_probe{suffix}")
    sys.path.insert(0, str(out))
    return target / "persona-probe"


def validate(tmp):
    import jsonschema
    from referencing import Registry, Resource

    docs = ROOT / "docs" / "schemas"
    registry = Registry()
    for f in docs.glob("*.schema.json"):
        registry = registry.with_resource(f.name, Resource.from_contents(json.loads(f.read_text())))

    def check(schema, instances):
        v = jsonschema.Draft202012Validator(json.loads((docs / schema).read_text()), registry=registry)
        for inst in instances:
            v.validate(inst)

    tmp = Path(tmp)
    lines = lambda p: [json.loads(l) for l in p.read_text().splitlines() if l.strip()]
    check("profile.schema.json", lines(tmp / "o" / "corpus.jsonl"))
    check("shard-manifest.schema.json", [json.loads((tmp / "shard" / "manifest.json").read_text())])
    check("shard-index.schema.json", lines(tmp / "shard" / "index.jsonl")[:500])
    for name in ("directions", "roc", "sweep"):
        check(f"{name}.schema.json", [json.loads((tmp / f"{name}.json").read_text())])


def run(cli, *args, cwd):
    p = subprocess.run([str(cli), *args], cwd=cwd, check=True, capture_output=True, text=True)
    return json.loads(p.stdout)


def main():
    cli = build()
    import persona_probe as pp

    # scoring
    ext_items = [f"EXT{i}" for i in range(1, 11)]
    all_five = {i: 5 for i in ext_items}
    neutral = {f"{t}{i}": 3 for t in ("EXT", "EST", "AGR", "CSN", "OPN") for i in range(1, 11)}
    assert pp.score(all_five)["EXT"] == (30, 3.0)
    assert all(v == (30, 3.0) for v in pp.score(neutral).values())
    try:
        pp.score({"XYZ1": 3})
        raise AssertionError("unknown item accepted")
    except pp.PersonaProbeError as e:
        assert str(e).startswith("INVALID_ARGUMENT")

    level, label, why = pp.parse_item_response("Strongly Agree. I never stop talking.")
    assert (level, label) == (5, "strongly agree") and why

    # fitting
    rows = [[1.0, 0.0, 2.0], [0.0, 1.0, 1.0], [2.0, 1.0, 0.0], [1.0, 3.0, 1.0]]
    truth = [0.5, -1.0, 2.0]
    y = [sum(a * b for a, b in zip(r, truth)) + 0.25 for r in rows]
    w, b = pp.least_squares(rows, y, "min-norm")
    assert max(abs(a - t) for a, t in zip(w, truth)) < 1e-8 and abs(b - 0.25) < 1e-8
    assert abs(pp.cosine(w, truth) - 1.0) < 1e-12

    # probing
    assert pp.auc([1.0, 2.0, 3.0], [0.0, 1.0]) == 5.5 / 6
    fc = pp.forced_choice_prompt()
    assert [r for r, _ in fc] == ["system", "user"]
    listed = [line[2:] for line in fc[1][1].splitlines() if line.startswith("- ")]
    parsed = pp.parse_forced_choice("\n".join(f"- {s}" for s in listed[:5]))
    assert abs(parsed["fraction_positive"] + parsed["fraction_negative"] + parsed["fraction_invalid"] - 1) < 1e-12

    shard = ROOT / "crates" / "cli" / "data" / "synthetic_shard"
    planted = json.loads((ROOT / "crates" / "cli" / "data" / "synthetic_planted.json").read_text())
    dirs = pp.DirectionSet.fit_shard(str(shard))
    w, _ = dirs.get("EXT", 0, "last_input_token")
    assert pp.cosine(w, planted["traits"][0]) > 0.95

    # toy steering end to end through the CLI
    with tempfile.TemporaryDirectory() as tmp:
        toy = ["--backend", "toy", "--toy-config", "o/toy.json"]
        run(cli, "oracle", "--out", "o", "--corpus-characters", "60", cwd=tmp)
        run(cli, "collect", "--corpus", "o/corpus.jsonl", "--out", "shard", "--instructions", "0,1", *toy, cwd=tmp)
        run(cli, "fit", "--shard", "shard", "--out", "directions.json", cwd=tmp)
        run(cli, "eval-adjectives", "--directions", "directions.json", "--out", "roc.json", *toy, cwd=tmp)
        run(cli, "sweep", "--directions", "directions.json", "--out", "sweep.json", *toy, cwd=tmp)
        validate(tmp)
        dirs = pp.DirectionSet.load(str(Path(tmp) / "directions.json"))
    backend = pp.ToyBackend()
    assert backend.model_id == dirs.model_id
    prompt = "Describe your ideal weekend."
    assert backend.steer(prompt, dirs, {"EXT": 0.0}) == backend.generate(prompt)
    try:
        backend.steer(prompt, dirs, {"EXT": 0.9})
        raise AssertionError("alpha bound not enforced")
    except pp.PersonaProbeError as e:
        assert str(e).startswith("ALPHA_OUT_OF_RANGE")
    curve = backend.sweep(dirs, [-0.4, -0.2, 0.0, 0.2, 0.4], repeats=2)
    assert curve[0] == 0.0 and curve[-1] == 1.0, curve
    assert all(a <= b for a, b in zip(curve, curve[1:])), curve
    print("ok", curve)


if __name__ == "__main__":
    main()
