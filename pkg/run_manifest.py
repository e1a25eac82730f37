"""
Run manifests: everything needed to reproduce a CLI run
"""

import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime

from file_processor import FileProcessor

TOOL_VERSION = "1.0.0"
MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    seed: int | None = None
    tool_version: str = TOOL_VERSION
    started: str = field(default_factory=lambda: datetime.now().strftime("%Y-%m-%d %H:%M:%S"))
    wall_time: float = 0.0
    outputs: list = field(default_factory=list)
    exit_code: int | None = None

    def __post_init__(self):
        self._clock = time.perf_counter()

    def record_input(self, file_path, processor: FileProcessor | None = None):
        """Hash an input file (sha256) under its path"""
        processor = processor or FileProcessor()
        self.inputs[str(file_path)] = processor.sha256(file_path)

    def record_output(self, file_path):
        name = os.path.basename(str(file_path))
        if name not in self.outputs:
            self.outputs.append(name)

    def finish(self, exit_code):
        self.exit_code = exit_code
        self.wall_time = time.perf_counter() - self._clock

    def to_dict(self):
        return asdict(self)

    def write(self, out_dir, processor: FileProcessor | None = None):
        processor = processor or FileProcessor()
        return processor.save_json(self.to_dict(), os.path.join(out_dir, MANIFEST_NAME))

    @classmethod
    def load(cls, run_dir, processor: FileProcessor | None = None) -> "RunManifest":
        processor = processor or FileProcessor()
        data = processor.load_json(os.path.join(run_dir, MANIFEST_NAME))
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)
