import csv
import io
import json
import logging
import pathlib

from typing import Optional, Sequence, Union


log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG_SUFFIX = ".config.json"


class ArtifactStore:
    """Output directory for one run; every file is written to a temporary name and renamed into place."""

    def __init__(self, root_dir:Union[pathlib.Path,str]=".", config:Optional[dict]=None):
        self.root_dir = pathlib.Path(root_dir)
        pathlib.Path.mkdir(self.root_dir, parents=True, exist_ok=True)
        self.config = dict(config or {})
        self.artifacts = {}
        self.config_files = {}

    def path(self, name:str) -> pathlib.Path:
        return self.root_dir / name

    def _write(self, name:str, text:str) -> pathlib.Path:
        file = self.path(name)
        tmp_file = file.with_name(file.name + "._tmp_")
        try:
            with open(tmp_file, "w", newline="") as f:
                f.write(text)
        except Exception as exc:
            log.error(f"{file}: error while writing file: {exc}")
            if tmp_file.exists():
                tmp_file.unlink()
            raise
        else:
            tmp_file.replace(file)
        log.debug(f"{file}: written")
        return file

    def write_json(self, name:str, doc:dict, echo_config:bool=True) -> pathlib.Path:
        if echo_config:
            doc = {**doc, "config": self.config}
        self.artifacts[name] = "json"
        return self._write(name, json.dumps(doc, indent=2, allow_nan=True) + "\n")

    def write_csv(self, name:str, header:Sequence[str], rows:Sequence[Sequence]) -> pathlib.Path:
        """The run config goes into the sidecar <stem>.config.json."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        self.artifacts[name] = "csv"
        file = self._write(name, buf.getvalue())
        sidecar = config_name(name)
        self._write(sidecar, json.dumps({"artifact": name, "config": self.config}, indent=2) + "\n")
        self.config_files[name] = sidecar
        return file

    def _entry(self, name:str, kind:str) -> dict:
        entry = {"name": name, "kind": kind}
        if name in self.config_files:
            entry["config"] = self.config_files[name]
        return entry

    def write_manifest(self) -> pathlib.Path:
        doc = {
            "artifacts": [self._entry(name, kind) for name, kind in sorted(self.artifacts.items())],
            "config": self.config,
        }
        return self._write(MANIFEST, json.dumps(doc, indent=2) + "\n")


def config_name(name:str) -> str:
    return pathlib.PurePath(name).stem + CONFIG_SUFFIX


def read_json(path:Union[pathlib.Path,str]) -> dict:
    with open(path) as f:
        return json.load(f)


# vim: set et sw=4 ts=4:
