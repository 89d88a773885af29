"""Derive images_versions.json from images20.json by adding neighbouring tags
that keep an image's lower layers and rebuild its top ones."""
import hashlib
import json
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent.parent / "registry"
VARIANTS = [
    ("wordpress", "6.4-apache", "6.3-apache", 3),
    ("wordpress", "6.4-apache", "6.5-apache", 3),
    ("php", "8.2-apache", "8.1-apache", 5),
    ("php", "8.2-apache", "8.3-apache", 5),
    ("nextcloud", "28-apache", "27-apache", 3),
    ("drupal", "10-apache", "9-apache", 3),
    ("python", "3.12", "3.11", 3),
    ("python", "3.12", "3.13", 3),
    ("gcc", "13", "12", 2),
    ("node", "20-bookworm-slim", "18-bookworm-slim", 3),
    ("postgres", "16", "15", 2),
    ("mysql", "8.0", "8.3", 2),
    ("tomcat", "10", "9", 3),
    ("mongo", "7.0", "6.0", 2),
    ("redis", "7", "7.2", 2),
    ("nginx", "1.25", "1.24", 2),
]


def digest(text):
    return "sha256:" + hashlib.sha256(text.encode()).hexdigest()


def main():
    base = json.loads((HERE / "images20.json").read_text())["images"]
    by_key = {(i["name"], i["tag"]): i for i in base}
    rng = random.Random(7)
    out = list(base)
    for name, src, tag, k in VARIANTS:
        parent = by_key[(name, src)]
        keep = parent["layers"][:-k]
        fresh = [
            {"digest": digest(f"layer/{name}:{tag}/{j}"), "size": max(1, int(l["size"] * rng.uniform(0.9, 1.1)))}
            for j, l in enumerate(parent["layers"][-k:])
        ]
        out.append({"name": name, "tag": tag, "config_digest": digest(f"config/{name}:{tag}"), "layers": keep + fresh})
    (HERE / "images_versions.json").write_text(json.dumps({"images": out}, indent=2) + "\n")


if __name__ == "__main__":
    main()
