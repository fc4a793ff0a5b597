import csv
import json
import os
import sys
import tempfile
from io import StringIO
from pathlib import Path

import django
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError

# Setup Django
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nsnlab.settings')
django.setup()

from nsn.analysis import uncertainty_rank_correlation  # noqa: E402
from nsn.data_io import load_checkpoint  # noqa: E402


def read_rows(path):
    with open(path, newline='') as handle:
        return list(csv.DictReader(handle))


def accuracy_by_rank(path):
    return {int(row['rank']): float(row['accuracy']) for row in read_rows(path)}


def run_tests():
    failures = []
    work = Path(tempfile.mkdtemp(prefix='nsn-verify-'))
    desk = str(settings.NSN_DEFAULT_CONFIG)

    print("\n" + "=" * 50)
    print("   NSN LAB - DESK-SCALE ACCEPTANCE RUN")
    print("=" * 50 + "\n")
    print(f"Working directory: {work}")

    def run(name, *args, **options):
        print(f"Running {name} ...", end=" ", flush=True)
        try:
            call_command(*args, quiet=True, stdout=StringIO(), **options)
            print("DONE")
            return True
        except CommandError as e:
            print(f"ERROR (exit {e.returncode}): {e}")
            failures.append(name)
            return False

    def check(name, passed, detail=''):
        print(f"Checking {name} ...", end=" ", flush=True)
        if passed:
            print(f"PASSED {detail}".rstrip())
        else:
            print(f"FAILED {detail}".rstrip())
            failures.append(name)

    # 1. Training and determinism
    print("\n--- Training ---")
    first, second = work / 'train_a', work / 'train_b'
    trained = run("train (desk recipe)", 'train', config=desk, out=str(first))
    repeated = run("train (same seed)", 'train', config=desk, out=str(second))
    if trained and repeated:
        same = all(
            (first / name).read_bytes() == (second / name).read_bytes()
            for name in ('model.nsnckpt', 'runlog.jsonl', 'frontier.csv')
        )
        check("bit-identical artifacts", same)

    # 2. Baselines
    print("\n--- Baselines ---")
    baselines = work / 'baselines'
    native_ok = run("baseline native", 'baseline', 'native', config=desk, out=str(baselines))
    truncate_ok = run("baseline truncate", 'baseline', 'truncate', config=desk, out=str(baselines))
    if native_ok and truncate_ok:
        native = accuracy_by_rank(baselines / 'baseline_native.csv')
        truncated = accuracy_by_rank(baselines / 'baseline_truncate.csv')
        margin = native[2] - truncated[2]
        check("native rank 2 beats truncation by 10 points", margin >= 0.10, f"({margin:+.4f})")

        if trained:
            nsn = accuracy_by_rank(first / 'frontier.csv')
            gaps = {r: native[r] - nsn[r] for r in native if r in nsn}
            worst = max(gaps.values())
            check("single NSN within 5 points of every specialist", worst <= 0.05, f"(worst gap {worst:+.4f})")

    # 3. Uncertainty ordering
    if trained:
        print("\n--- Learned uncertainty ---")
        u = load_checkpoint(first / 'model.nsnckpt').uncertainty
        rho = uncertainty_rank_correlation(u)
        check("higher ranks learn lower s_k", rho <= -0.8, f"(spearman {rho:+.3f})")

    # 4. Objective ablation
    print("\n--- Ablation ---")
    document = json.loads((Path(settings.BASE_DIR) / 'configs' / 'ablation.json').read_text())
    document['ablation']['modes'] = ['ce_only', 'two_ce']
    config = work / 'ablation.json'
    config.write_text(json.dumps(document))
    if run("ablate ce_only vs two_ce", 'ablate', config=str(config), out=str(work / 'ablation')):
        rows = {row['mode']: row for row in read_rows(work / 'ablation' / 'ablation.csv')}
        id_margin = float(rows['two_ce']['avg_id_mean']) - float(rows['ce_only']['avg_id_mean'])
        ood_margin = float(rows['two_ce']['avg_ood_mean']) - float(rows['ce_only']['avg_ood_mean'])
        check("two_ce improves ID accuracy by 10 points", id_margin >= 0.10, f"({id_margin:+.4f})")
        check("two_ce improves OOD accuracy by 10 points", ood_margin >= 0.10, f"({ood_margin:+.4f})")

    print("\n" + "=" * 50)
    if failures:
        print(f"   {len(failures)} CHECK(S) FAILED: {', '.join(failures)}")
    else:
        print("   ALL CHECKS PASSED")
    print("=" * 50 + "\n")
    return not failures


if __name__ == "__main__":
    sys.exit(0 if run_tests() else 1)
