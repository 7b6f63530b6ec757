#!/usr/bin/env python
"""
KTPFormer Test Runner

Runs the ktpformer test suites, optionally restricted to categories.

Usage:
    python run_tests.py                    # Run all tests
    python run_tests.py --numerics         # Tensor engine and gradient rules
    python run_tests.py --model            # Topology, prior attention, transformer, model
    python run_tests.py --training         # Losses, optimizer, trainer, gradient audit
    python run_tests.py --evaluation       # Metrics and Procrustes alignment
    python run_tests.py --io               # Clip files, configs, checkpoints, synthesis
    python run_tests.py --commands         # Management commands and the run registry API
    python run_tests.py --slow             # Also run the long acceptance tests
    python run_tests.py --coverage         # Run with coverage report
    python run_tests.py --verbose          # Run with verbose output
"""

import os
import sys
import argparse
import django
from django.conf import settings
from django.test.utils import get_runner


CATEGORIES = {
    'numerics': ['ktpformer.tests_numerics'],
    'model': ['ktpformer.tests_topology', 'ktpformer.tests_prior_attention',
              'ktpformer.tests_transformer', 'ktpformer.tests_model'],
    'training': ['ktpformer.tests_training'],
    'evaluation': ['ktpformer.tests_evaluation'],
    'io': ['ktpformer.tests_io'],
    'commands': ['ktpformer.tests_commands', 'ktpformer.tests_api'],
}


def setup_django():
    """Set up Django environment for testing"""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'ktp_lab.settings')
    django.setup()


def run_specific_tests(test_labels, verbosity=1, coverage=False, failfast=False):
    """Run the given test labels, optionally under coverage"""
    if coverage:
        try:
            import coverage
            cov = coverage.Coverage(source=['ktpformer'])
            cov.start()
        except ImportError:
            print("Coverage module not installed. Install with: pip install coverage")
            coverage = False

    test_runner = get_runner(settings)(verbosity=verbosity, failfast=failfast)
    failures = test_runner.run_tests(test_labels)

    if coverage:
        cov.stop()
        cov.save()
        print("\nCoverage Report:")
        cov.report()
        cov.html_report(directory='htmlcov')
        print("\nHTML coverage report generated in 'htmlcov/' directory")

    return failures


def main():
    parser = argparse.ArgumentParser(description='Run KTPFormer tests')
    for category in CATEGORIES:
        parser.add_argument(f'--{category}', action='store_true',
                            help=f'Run only the {category} tests')
    parser.add_argument('--slow', action='store_true',
                        help='Enable the long acceptance tests (sets KTP_SLOW_TESTS)')
    parser.add_argument('--coverage', action='store_true',
                        help='Run with coverage analysis')
    parser.add_argument('--verbose', '-v', action='store_true',
                        help='Run with verbose output')
    parser.add_argument('--failfast', action='store_true',
                        help='Stop on first failure')

    args = parser.parse_args()

    if args.slow:
        os.environ['KTP_SLOW_TESTS'] = 'True'
    setup_django()

    verbosity = 2 if args.verbose else 1

    test_labels = []
    for category, labels in CATEGORIES.items():
        if getattr(args, category):
            test_labels.extend(labels)
    if not test_labels:
        test_labels = [label for labels in CATEGORIES.values() for label in labels]

    print(f"\n{'='*60}")
    print(f"Running {', '.join(test_labels)}")
    print(f"{'='*60}")

    failures = run_specific_tests(test_labels, verbosity, args.coverage, args.failfast)

    print(f"\n{'='*60}")
    print("Test Summary")
    print(f"{'='*60}")

    if failures:
        print(f"❌ {failures} test(s) failed")
        sys.exit(1)
    else:
        print("✅ All tests passed!")
        sys.exit(0)


if __name__ == '__main__':
    main()
