"""Convert the ReVeal dump (vulnerables.json, non-vulnerables.json) to JSONL."""

import json
import sys


def main(vulnerable: str, clean: str) -> None:
    for path, label in ((vulnerable, 1), (clean, 0)):
        with open(path) as f:
            for item in json.load(f):
                sys.stdout.write(json.dumps({"code": item["code"], "label": label}) + "\n")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit("usage: reveal_to_jsonl.py vulnerables.json non-vulnerables.json")
    main(sys.argv[1], sys.argv[2])
