"""
The command-line pipeline end to end
====================================

Writes a synthetic ratings file, then runs ``prepare``, ``train``,
``evaluate`` and ``recommend`` exactly as a shell user would (through
``signrec.cli.main``). Everything lands in a temporary directory unless a
path is given as the first argument.
"""

import sys
import tempfile
from pathlib import Path

from signrec.cli import main
from signrec.synthetic import planted_communities

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="signrec-"))
root.mkdir(parents=True, exist_ok=True)
ratings = root / "ratings.tsv"
records = planted_communities(liked_per_user=20, popularity=3.0, seed=0)
ratings.write_text("".join(f"{r.user_id}\t{r.item_id}\t{r.rating:g}\n" for r in records))
print("workspace:", root)

# a small config file; anything on the command line wins over it
config = root / "small.txt"
config.write_text("dim = 16\nbatch_size = 256\nlr = 0.01\nlr_milestones =\nnum_folds = 2\neval_every = 5\n")


def run(*args):
    print("\n$ signrec", " ".join(str(a) for a in args))
    code = main([str(a) for a in args])
    assert code == 0, code


# %%
# 5-core filtering and two seeded 80/20 holdout folds
run("--config", config, "prepare", ratings, root / "ds")
print((root / "ds" / "stats.txt").read_text())

# %%
# two folds, 40 epochs each; best.ckpt keeps the epoch with the best Recall@10
run("--config", config, "--deterministic", "train", root / "ds", root / "run", "--epochs", 40)
print((root / "run" / "fold0" / "train.log").read_text().splitlines()[-1])

# %%
# the table has a column per method; --suite adds the no-filter column
run("evaluate", root / "run", "--suite", "--out", root / "report")
print(sorted(p.name for p in (root / "report").iterdir()))

# %%
# top-5 for two users; an unknown id goes to the .rejects file
run("recommend", root / "run", "--out", root / "recs.txt", "--k", 5, "--users", "u0", "u77", "nobody")
print((root / "recs.txt").read_text())
print("rejects:", (root / "recs.txt.rejects").read_text().split())
