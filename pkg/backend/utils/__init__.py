#!/usr/bin/env python3
"""
I2N Utilities Package
"""

from .errors import I2NError, ConfigError
from .files import read_csv_artifact, read_json, read_provenance, sha256_file, write_csv_artifact, write_json_artifact
from .yaml_utils import ManifestDumper, clean_yaml_output, dump_manifest, load_manifest

__all__ = [
    'I2NError',
    'ConfigError',
    'read_csv_artifact',
    'read_json',
    'read_provenance',
    'sha256_file',
    'write_csv_artifact',
    'write_json_artifact',
    'ManifestDumper',
    'clean_yaml_output',
    'dump_manifest',
    'load_manifest',
]
