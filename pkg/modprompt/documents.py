"""
Plain-text documents: configs, schedules, manifests and reports are YAML.
"""
import os
from typing import Any, Mapping

import yaml

from .exceptions import ConfigError


def load_document(path: str) -> Any:
    """
    Parse a YAML file.

    :raise: ConfigError with the line and column of a syntax problem,
        OSError if the file cannot be read
    :param path: file to read
    :return: parsed content
    """
    with open(path, encoding='utf-8') as stream:
        try:
            return yaml.safe_load(stream)
        except yaml.YAMLError as error:
            mark = getattr(error, 'problem_mark', None)
            where = (
                '{}:{}:{}'.format(path, mark.line + 1, mark.column + 1)
                if mark is not None else path
            )
            problem = getattr(error, 'problem', None) or str(error)
            raise ConfigError('{}: {}'.format(where, problem)) from error


def dump_document(doc: Mapping[str, Any], path: str = None) -> str:
    """
    Serialize a document, keeping key order; write it if `path` is given.

    :return: the YAML text
    """
    text = yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)
    if path is not None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as stream:
            stream.write(text)
    return text
