"""Runs synth, train, extract and probe, then validates the probe result JSON."""
import json
import pathlib
import shutil
import subprocess
import sys

import jsonschema


def run(cli, *args):
    subprocess.run([cli, *args], check=True, stdout=subprocess.DEVNULL)


def main():
    cli, schema_path, work = sys.argv[1], pathlib.Path(sys.argv[2]), pathlib.Path(sys.argv[3])
    shutil.rmtree(work, ignore_errors=True)
    work.mkdir(parents=True)
    config = {
        "data": {"dims": 32, "lesion_box": {"lo": [8, 8, 8], "hi": [24, 24, 32]},
                 "displacement_mm": 1.0, "displacement_spacing_mm": 8.0},
        "grid": {"patch_size": 8, "step": 8},
        "model": {"patch_size": 8, "stages": [[4, 1], [8, 1]], "feature_dim": 8},
        "train": {"patch_queue": 16, "graph_queue": 32},
    }
    cfg = work / "config.json"
    cfg.write_text(json.dumps(config))
    common = ["--config", str(cfg), "--seed", "11"]
    run(cli, "synth", *common, "--out", str(work / "cohort"), "--subjects", "10")
    run(cli, "train", *common, "--cohort", str(work / "cohort"), "--out", str(work / "run"), "--steps", "1")
    run(cli, "extract", *common, "--checkpoint", str(work / "run" / "model.ckpt"),
        "--cohort", str(work / "cohort"), "--out", str(work / "features.csv"))
    schema = json.loads(schema_path.read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    targets = {"classification": "labels.csv", "regression": "severity.csv"}
    for task, labels in targets.items():
        out = work / f"{task}.json"
        run(cli, "probe", *common, "--features", str(work / "features.csv"),
            "--labels", str(work / "cohort" / labels), "--task", task, "--k", "5", "--out", str(out))
        jsonschema.validate(json.loads(out.read_text()), schema,
                            cls=jsonschema.Draft202012Validator)
        print(f"{task}: valid")


if __name__ == "__main__":
    main()
