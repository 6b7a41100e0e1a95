"""
End to end through the CLI
==========================

gen-data -> search -> train -> eval -> infer on a desk-scale synthetic set.
Same calls as the shell commands in the README. Takes a few minutes.
"""

import json
from pathlib import Path

from manas.cli import main

root = Path("demo_out/pipeline")
data, run = root / "data", root / "run"
common = ["--data", str(data), "--out", str(run), "--num-cells", "1", "--channels", "8", "--seed", "1"]

main(["gen-data", "--out", str(data), "--trainA", "4", "--trainB", "4", "--test", "2", "--size", "32", "--seed", "1"])
main(["search", *common, "--iterations", "300"])
print((run / "genotype.json").read_text())
main(["train", *common, "--epochs", "200"])
for split in ("train", "test"):
    main(["eval", *common, "--split", split])
    s = json.loads((run / "report" / "eval_summary.json").read_text())
    print(f"{split}: {s['mean_psnr']:.2f} dB vs input {s['input_mean_psnr']:.2f} dB")

rainy = sorted((data / "rain").glob("*__heavy.png"))[:2]
main(["infer", "--checkpoint", str(run / "ckpt" / "model.npz"), "--out", str(run), *map(str, rainy)])
print("derained:", sorted(p.name for p in (run / "infer").iterdir()))
