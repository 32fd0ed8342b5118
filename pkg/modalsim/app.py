import inspect
import logging
import os
import sys

import sentry_sdk

from modalsim import status_flag as flag
from modalsim.exceptions import ConfigurationError
from modalsim.mdb import BaseModel, models
from modalsim.metrics import dump_metrics
from modalsim.runman import RunConfig, RunMan


def _as_tuple(value):
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return (float(value),)
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(float(v) for v in value)


class App:
    def __init__(self) -> None:
        self._prepared = False
        self._prepare()

    def _init_config(self):
        self.config = {
            "LOG_LEVEL": os.getenv("MODALSIM_LOG_LEVEL", "info"),
            "THREADS": os.getenv("MODALSIM_THREADS", str(os.cpu_count() or 1)),
            "SENTRY_DSN": os.getenv("MODALSIM_SENTRY_DSN"),
            "OUT": os.getenv("MODALSIM_OUT", "out"),
            "METRICS_FILE": os.getenv("MODALSIM_METRICS_FILE"),
        }

        self.log_level = self.config["LOG_LEVEL"]
        self.sentry_dsn = self.config["SENTRY_DSN"]
        self.out_dir = self.config["OUT"]
        self.metrics_file = self.config["METRICS_FILE"]
        try:
            self.threads = int(self.config["THREADS"])
        except ValueError:
            raise ConfigurationError(f"MODALSIM_THREADS={self.config['THREADS']!r} is not an integer")
        if self.threads < 1:
            raise ConfigurationError("MODALSIM_THREADS must be at least 1")

        self.use_sentry = bool(self.sentry_dsn)

    def _init_logger(self):
        """
        basic log config
        """
        log_levels = {
            "CRITICAL": 50,
            "ERROR": 40,
            "WARNING": 30,
            "INFO": 20,
            "DEBUG": 10,
        }
        level = log_levels[self.log_level.upper()]
        if level == 20:
            format = "%(message)s"
        else:
            format = "[%(levelname)s]%(asctime)s %(funcName)s line:%(lineno)d --- %(message)s"
        logging.basicConfig(level=level, format=format)

    def _init_memory_db(self):

        for _, model in inspect.getmembers(models, inspect.isclass):
            if issubclass(model, BaseModel) and model != BaseModel:
                model.create_table()
                logging.debug(f"正在创建{model}内存数据库")

    def _init_sentry(self):
        if not self.use_sentry:
            return
        sentry_sdk.init(dsn=self.sentry_dsn)
        logging.info("Init Sentry Client...")

    def _prepare(self):
        if self._prepared:
            return
        self._init_config()
        self._init_logger()
        self._init_memory_db()
        self._init_sentry()
        self.runman = RunMan(self.threads, self.out_dir)
        self._prepared = True

    def _dispatch(self, **kw):
        try:
            config = RunConfig(**kw)
            handler = getattr(self.runman, f"cmd_{config.command}")
            code = handler(config)
        except ConfigurationError as e:
            logging.error(f"invalid input: {e}")
            code = flag.EXIT_INVALID_INPUT
        except Exception as e:
            logging.exception(f"unexpected error: {e}")
            if self.use_sentry:
                sentry_sdk.capture_exception(e)
            raise
        finally:
            if self.metrics_file:
                dump_metrics(self.metrics_file)
        logging.info(f"{kw['command']} 结束: {flag.get_status_for_human(code)}")
        sys.exit(code)

    def decompose(self, scenario="scenario.json", preset=None, out=None):
        self._dispatch(
            command=flag.CMD_DECOMPOSE,
            scenario_path=scenario,
            preset=preset,
            out=out or self.out_dir,
        )

    def run(
        self,
        scenario="scenario.json",
        preset=None,
        seed=None,
        ntraj=None,
        dt=None,
        checkpoints=None,
        out=None,
        format=flag.FORMAT_CSV,
    ):
        self._dispatch(
            command=flag.CMD_RUN,
            scenario_path=scenario,
            preset=preset,
            seed=seed,
            n_traj=ntraj,
            dt=dt,
            checkpoints=_as_tuple(checkpoints),
            out=out or self.out_dir,
            fmt=format,
        )

    def verify(self, seed=0, out=None, quick=False, suites=None):
        if isinstance(suites, str):
            suites = suites.split(",")
        self._dispatch(
            command=flag.CMD_VERIFY,
            seed=seed,
            out=out or self.out_dir,
            quick=bool(quick),
            suites=tuple(suites or ()),
        )

    def faithfulness(self, scenario="scenario.json", preset=None, seed=None, ntraj=None, out=None):
        self._dispatch(
            command=flag.CMD_FAITHFULNESS,
            scenario_path=scenario,
            preset=preset,
            seed=seed,
            n_traj=ntraj,
            out=out or self.out_dir,
        )
