# type: ignore
# pylint: disable=redefined-outer-name, missing-function-docstring, missing-class-docstring
# pylint: disable=unsubscriptable-object, wrong-import-order

import json

import numpy as np
import pytest

from app.cli.deps import DATA_DIR, read_suite, run_id
from app.core.config import RunConfig
from app.core.exceptions import (
    BackendError,
    DirectiveFailedError,
    EmptyEntityError,
    EmptyInputError,
    MissingAnchorError,
    ParseError,
)
from app.diffusion.reference import ReferenceDenoiser
from app.entity.directive import TokenVocabulary
from app.entity.latent import LatentGrid
from app.entity.layout import BBox, LayoutMask, LayoutReport, MaskSource
from app.main import exit_code, main
from app.service.artifacts import (
    format_layout,
    parse_layout,
    read_latent,
    write_latent,
    write_manifest,
    write_mask_pgm,
)
from app.service.run_store import load_run, rebuild_result, save_run
from app.service.srf_engine import SRFEngine

DEMO = str(DATA_DIR / "demo.script")
SCENE = "add a cat on the left of the image, then add a dog on the right of the image"


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text("# quick runs\nsteps = 10\nstimulus_steps = 5\ntau = 8\nheight = 8\nwidth = 8\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def suite_file(tmp_path):
    path = tmp_path / "suite.txt"
    path.write_text("# two scenes\n" + SCENE + "\nadd a lamp above the image\n", encoding="utf-8")
    return str(path)


def test_decompose_to_stdout(capsys):
    assert main(["decompose", SCENE]) == 0

    lines = capsys.readouterr().out.splitlines()
    assert lines == ["add: cat | pos=left of anchor=image", "add: dog | pos=right of anchor=image"]


def test_decompose_to_file(tmp_path, parser):
    out = tmp_path / "scene.script"
    source = tmp_path / "scene.txt"
    source.write_text("add a cat. then change the cat to a rabbit\n", encoding="utf-8")

    assert main(["decompose", "--file", str(source), "--out", str(out)]) == 0

    assert len(parser.load_script(out)) == 2


def test_decompose_errors(capsys):
    assert main(["decompose", "a horse under a car and between a cat and a dog"]) == 2
    assert "error:" in capsys.readouterr().err

    assert main(["decompose"]) == 4
    assert main(["decompose", "--file", "/nonexistent/scene.txt"]) == 4


def test_layout_command(tmp_path, capsys):
    assert main(["layout", "--text", SCENE]) == 0
    report = parse_layout(capsys.readouterr().out)
    assert list(report.boxes) == ["cat", "dog"]
    assert report.boxes["cat"].center[0] < 0.5 < report.boxes["dog"].center[0]

    out = tmp_path / "layouts"
    assert main(["layout", "--script", DEMO, "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["00.txt", "01.txt", "02.txt", "03.txt"]
    assert list(parse_layout((out / "02.txt").read_text(encoding="utf-8")).boxes) == ["rabbit", "dog"]


def test_layout_with_anchors(tmp_path, capsys):
    anchors = tmp_path / "anchors.txt"
    anchors.write_text("table 0.3 0.5 0.7 0.9\n", encoding="utf-8")

    assert main(["layout", "--text", "add a lamp on top of the table", "--anchors", str(anchors)]) == 0

    report = parse_layout(capsys.readouterr().out)
    assert report.boxes["table"] == BBox(0.3, 0.5, 0.7, 0.9)
    assert report.boxes["lamp"].center[1] < 0.7


def test_layout_missing_anchor():
    assert main(["layout", "--text", "add a dog next to the sofa"]) == 3


def test_run_writes_run_directory(tmp_path, small_config_file, capsys):
    out = tmp_path / "run"

    assert main(["run", "--script", DEMO, "--config", small_config_file, "--out", str(out)]) == 0

    assert capsys.readouterr().out.strip() == str(out)
    assert sorted(p.name for p in (out / "stages").iterdir()) == ["00.latent", "01.latent", "02.latent", "03.latent"]
    assert len(list((out / "traces").glob("*.json"))) == 4
    assert list((out / "heatmaps").glob("*.pgm"))
    masks = sorted(p.name for p in (out / "layout").glob("*.pgm"))
    assert masks == ["00_cat.pgm", "01_cat.pgm", "01_dog.pgm", "02_dog.pgm", "02_rabbit.pgm", "03_dog.pgm"]
    header, pixels = (out / "layout" / "00_cat.pgm").read_bytes().split(b"255\n", 1)
    assert header == b"P5\n8 8\n"
    assert len(pixels) == 64
    assert set(pixels) == {0, 255}
    trace = json.loads((out / "traces" / "00.json").read_text(encoding="utf-8"))
    assert trace["stage"] == 0
    assert trace["mode"] == "SYNTHESIS"
    assert len(trace["steps"]) == 10
    assert read_latent(out / "stages" / "03.latent").shape == (4, 8, 8)
    assert RunConfig.from_file(out / "config.txt").steps == 10


def test_run_is_reproducible(tmp_path, small_config_file):
    for name in ("a", "b"):
        args = ["run", "--text", SCENE, "--config", small_config_file, "--seed", "3", "--out", str(tmp_path / name)]
        assert main(args) == 0

    manifest_a = (tmp_path / "a" / "manifest.txt").read_text(encoding="utf-8")
    assert manifest_a == (tmp_path / "b" / "manifest.txt").read_text(encoding="utf-8")
    assert "stages/01.latent" in manifest_a


def test_run_seed_changes_output(tmp_path, small_config_file):
    for seed in ("1", "2"):
        out = str(tmp_path / seed)
        assert main(["run", "--text", "add a cat", "--config", small_config_file, "--seed", seed, "--out", out]) == 0

    a = read_latent(tmp_path / "1" / "stages" / "00.latent")
    b = read_latent(tmp_path / "2" / "stages" / "00.latent")
    assert not np.array_equal(a.data, b.data)


def test_run_with_background(tmp_path, small_config_file):
    background = tmp_path / "bg.latent"
    write_latent(LatentGrid.random((4, 8, 8), 0), background)

    out = tmp_path / "run"
    args = ["run", "--text", "add a cat", "--config", small_config_file, "--out", str(out)]
    args += ["--background", str(background)]

    assert main(args) == 0
    np.testing.assert_array_equal(read_latent(out / "background.latent").data, read_latent(background).data)


def test_run_missing_background(tmp_path):
    missing = str(tmp_path / "none.latent")

    assert main(["run", "--text", "add a cat", "--background", missing, "--out", str(tmp_path / "run")]) == 4


def test_run_failure_keeps_partial_run(tmp_path, small_config_file):
    out = tmp_path / "run"
    text = "add a cat. then add a dog next to the sofa"

    code = main(["run", "--text", text, "--config", small_config_file, "--out", str(out)])

    assert code == 3
    assert [p.name for p in (out / "stages").iterdir()] == ["00.latent"]
    assert (out / "manifest.txt").is_file()


def test_eval_command(tmp_path, small_config_file, capsys):
    out = tmp_path / "run"
    assert main(["run", "--script", DEMO, "--config", small_config_file, "--out", str(out)]) == 0
    capsys.readouterr()

    assert main(["eval", str(out)]) == 0

    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["object_recall"] <= 1.0
    assert [r["mode"] for r in report["records"]] == ["SYNTHESIS", "SYNTHESIS", "EDITING", "ERASING"]
    assert report["relation_accuracy"] is not None


def test_eval_empty_directory(tmp_path):
    assert main(["eval", str(tmp_path)]) == 2


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("alpha = -1\n", encoding="utf-8")
    assert main(["layout", "--text", "add a cat", "--config", str(bad)]) == 2

    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("temperature = 1.0\n", encoding="utf-8")
    assert main(["layout", "--text", "add a cat", "--config", str(unknown)]) == 2


def test_ablate_command(tmp_path, small_config_file, suite_file, capsys):
    out = tmp_path / "ablation.json"
    args = ["ablate", "--config", small_config_file, "--suite", suite_file, "--seeds", "2", "--out", str(out)]

    assert main(args) == 0

    names = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert names == ["full", "no_fusion", "no_sr"]
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert len(payload["full"]["cases"]) == 4
    assert [c["seed"] for c in payload["no_sr"]["cases"]] == [0, 1, 0, 1]


def test_sweep_command(small_config_file, suite_file, capsys):
    args = ["sweep", "alpha", "--values", "0,20,40", "--seeds", "1"]
    args += ["--config", small_config_file, "--suite", suite_file]

    assert main(args) == 0

    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "value,object_recall,relation_accuracy"
    assert [line.split(",")[0] for line in lines[1:]] == ["0.0", "20.0", "40.0"]


@pytest.mark.parametrize("values", ["40,0", "a,b", ""])
def test_sweep_rejects_values(small_config_file, suite_file, values):
    assert main(["sweep", "tau", "--values", values, "--config", small_config_file, "--suite", suite_file]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--directions", "5"]) == 0
    assert capsys.readouterr().out.startswith("directions=5 max_rel_error=")

    assert main(["gradcheck", "--directions", "3", "--tolerance", "0"]) == 1
    assert main(["gradcheck", "--directions", "3", "--step", "1e-4"]) == 0
    assert main(["gradcheck", "--directions", "3", "--step", "0.5", "--tolerance", "1e-9"]) == 1


def test_read_suite_errors(tmp_path, parser):
    with pytest.raises(EmptyInputError):
        read_suite(tmp_path / "missing.txt", parser)

    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing here\n\n", encoding="utf-8")
    with pytest.raises(EmptyInputError):
        read_suite(empty, parser)

    bad = tmp_path / "bad.txt"
    bad.write_text("add a cat\nchange the cat\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc_info:
        read_suite(bad, parser)
    assert exc_info.value.line_no == 2


def test_bundled_suite(parser):
    scripts = read_suite(DATA_DIR / "suite.txt", parser)

    assert len(scripts) == 6
    assert [len(s) for s in scripts] == [2, 2, 1, 1, 2, 3]


@pytest.mark.parametrize(
    ("error", "code"),
    [
        (ParseError("bad", line_no=1), 2),
        (EmptyEntityError("empty"), 2),
        (MissingAnchorError("sofa"), 3),
        (BackendError("gone"), 4),
        (EmptyInputError("nothing"), 4),
    ],
)
def test_exit_code(error, code):
    assert exit_code(error) == code


def test_exit_code_of_failed_directive():
    for cause, code in ((MissingAnchorError("sofa"), 3), (BackendError("gone"), 4)):
        try:
            raise DirectiveFailedError(1, None, cause) from cause
        except DirectiveFailedError as exc:
            assert exit_code(exc) == code


def test_run_id_depends_on_seed(config):
    assert run_id(config) == run_id(RunConfig.build())
    assert run_id(config) != run_id(RunConfig.build(seed=1))
    assert len(run_id(config)) == 32


def test_latent_file_roundtrip(tmp_path):
    latent = LatentGrid.random((2, 3, 4), 9)
    path = tmp_path / "z.latent"

    write_latent(latent, path)

    assert path.read_bytes().startswith(b"2 3 4\n")
    np.testing.assert_array_equal(read_latent(path).data, latent.data)


@pytest.mark.parametrize("payload", [b"", b"2 3\n", b"1 1 1\n\x00\x00"])
def test_latent_file_errors(tmp_path, payload):
    path = tmp_path / "z.latent"
    path.write_bytes(payload)

    with pytest.raises(ParseError):
        read_latent(path)


def test_layout_format():
    report = LayoutReport({"red car": BBox(0.1, 0.2, 0.3, 0.4)})

    text = format_layout(report)

    assert text == "red car 0.100000 0.200000 0.300000 0.400000\n"
    assert parse_layout(text) == report

    with pytest.raises(ParseError) as exc_info:
        parse_layout("# header\ncar 0.1 0.2 0.3\n")
    assert exc_info.value.line_no == 2
    with pytest.raises(ParseError):
        parse_layout("car 0.5 0.2 0.3 0.4\n")


def test_manifest_lists_files(tmp_path):
    (tmp_path / "b.txt").write_text("b", encoding="utf-8")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "a.txt").write_text("a", encoding="utf-8")

    lines = write_manifest(tmp_path).read_text(encoding="utf-8").splitlines()

    assert [line.split("  ")[1] for line in lines] == ["b.txt", "sub/a.txt"]


def test_write_mask_pgm(tmp_path):
    grid = np.zeros((2, 3), dtype=bool)
    grid[1, 2] = True
    path = tmp_path / "layout" / "00_cat.pgm"

    write_mask_pgm(LayoutMask(grid, MaskSource.FROM_BOX), path)

    assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes([0, 0, 0, 0, 0, 255])


def test_run_store_roundtrip(
tmp_path, small_config, parser):
    script = parser.decompose(SCENE)
    vocab = TokenVocabulary.from_script(script)
    denoiser = ReferenceDenoiser(4, 8, 8)
    engine = SRFEngine.from_config(small_config, denoiser)
    result = engine.run_progressive(LatentGrid.random((4, 8, 8), 0), script, vocab=vocab)

    save_run(tmp_path, small_config, script, result, vocab)
    stored = load_run(tmp_path, parser)

    assert stored.config == small_config
    assert stored.script.directives == script.directives
    assert len(stored.latents) == 2
    np.testing.assert_array_equal(stored.latents[-1].data, result.final.data)
    assert list(stored.layouts[-1].boxes) == ["cat", "dog"]

    rebuilt = rebuild_result(stored, denoiser, vocab)
    assert rebuilt.failure is None
    assert set(rebuilt.masks) == {"cat", "dog"}
    assert sorted(rebuilt.scene_attention.tokens) == sorted(vocab.ids.values())


def test_load_run_errors(tmp_path, parser):
    with pytest.raises(ParseError):
        load_run(tmp_path, parser)
