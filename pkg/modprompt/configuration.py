"""
Configuration file.
"""
import logging
import os

from .exceptions import NoInitiation


OUTPUT_DIR_ENV = 'MODPROMPT_OUTPUT_DIR'
DEFAULT_OUTPUT_DIR = 'results'


class Config:
    """
    Config singleton.
    """
    output_dir = os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR)
    log_level = logging.INFO

    def __init__(self):
        """
        Should not be instantiated.
        """
        raise NoInitiation

    @classmethod
    def set_output_dir(cls, path: str = None):
        """
        Set the directory reports are written to.

        :param path: directory; `None` re-reads the environment variable
        """
        if path is None:
            path = os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR)
        cls.output_dir = path

    @classmethod
    def set_log_level(cls, level: int):
        """
        Set the level used when the CLI configures logging.
        """
        cls.log_level = level

