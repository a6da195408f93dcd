#!/usr/bin/env python3
"""
Simple test runner for the joint-model risk engine.

Runs every test_* function of the test modules in this directory; the same
functions are collected by pytest. Long MCMC runs are skipped unless
JOINTRISK_RUN_SLOW_TESTS=1.
"""

import argparse
import asyncio
import importlib
import inspect
import logging
import sys
import time
import unittest
from dataclasses import dataclass, field
from pathlib import Path
from types import ModuleType
from typing import List, Optional

# Add current directory to path
sys.path.insert(0, str(Path(__file__).parent))

logger = logging.getLogger("run_tests")

TEST_MODULES = [
    "test_cohort_data",
    "test_config",
    "test_mixed_model",
    "test_growth_imputation",
    "test_longitudinal_model",
    "test_hazard_model",
    "test_bayes_engine",
    "test_mcmc_diagnostics",
    "test_dynamic_prediction",
    "test_evaluation",
    "test_simulation",
    "test_cli",
    "test_performance_profiler",
]


@dataclass
class TestResults:
    passed: int = 0
    failed: int = 0
    skipped: int = 0
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed == 0


def _call(test) -> None:
    outcome = test()
    if inspect.iscoroutine(outcome):
        asyncio.run(outcome)


def run_module(module: ModuleType, results: Optional[TestResults] = None,
               pattern: Optional[str] = None) -> int:
    """Run the test_* functions of one module; returns a process exit code."""
    results = results if results is not None else TestResults()
    tests = [obj for name, obj in inspect.getmembers(module, inspect.isfunction)
             if name.startswith("test_") and obj.__module__ == module.__name__]
    tests.sort(key=lambda fn: fn.__code__.co_firstlineno)
    logger.info(f"Running {len(tests)} tests from {module.__name__}")
    for test in tests:
        if pattern and pattern not in test.__name__:
            continue
        started = time.perf_counter()
        try:
            _call(test)
        except unittest.SkipTest as e:
            results.skipped += 1
            logger.info(f"- {test.__name__} skipped: {e}")
            continue
        except Exception as e:
            results.failed += 1
            results.failures.append(f"{module.__name__}.{test.__name__}")
            logger.error(f"✗ {test.__name__} failed: {type(e).__name__}: {e}", exc_info=True)
            continue
        results.passed += 1
        logger.info(f"✓ {test.__name__} passed ({time.perf_counter() - started:.2f}s)")
    return 0 if results.ok else 1


def main(argv: Optional[List[str]] = None) -> int:
    """Run all tests."""
    parser = argparse.ArgumentParser(description="Run the test suite without pytest")
    parser.add_argument("modules", nargs="*", help="Test modules to run (default: all)")
    parser.add_argument("-k", dest="pattern", help="Only run tests whose name contains this text")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)

    results = TestResults()
    for name in args.modules or TEST_MODULES:
        module = importlib.import_module(name.removesuffix(".py"))
        run_module(module, results, args.pattern)

    logger.info(f"Test Results: {results.passed} passed, {results.failed} failed, {results.skipped} skipped")
    if results.ok:
        print("\n🎉 All tests passed!")
        return 0
    print("\n❌ Some tests failed!")
    for failure in results.failures:
        print(f"  {failure}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
