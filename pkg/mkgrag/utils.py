import json
import os
import re

_sentence_boundary = re.compile(r"(?<=[.!?])\s+")


def count_tokens(text: str) -> int:
    # A token is a whitespace-delimited word, everywhere in the engine
    return len(text.split())


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def split_sentences(text: str) -> list[str]:
    text = normalize_whitespace(text)
    if not text:
        return []
    return [sentence for sentence in _sentence_boundary.split(text) if sentence]


def load_settings(path, cache):
    """
    Loads a JSON file, re-reading it only when its mtime changes.
    Returns None when the file does not exist and "__JSON_ERROR__" when it
    can not be parsed.
    """
    cache = {} if cache is None else cache
    try:
        mtime = os.path.getmtime(path)
    except (OSError, FileNotFoundError):
        cache["cache"] = None
        cache["mtime"] = None
        return cache["cache"]
    cache_settings = cache.get("cache")
    cache_mtime = cache.get("mtime")
    if cache_settings is None or cache_mtime != mtime:
        try:
            with open(path, "r", encoding="utf-8") as f:
                config_data = json.load(f)
                cache["cache"] = config_data
            cache["mtime"] = mtime
        except json.JSONDecodeError:
            cache["cache"] = "__JSON_ERROR__"
            cache["mtime"] = mtime
        except (OSError, FileNotFoundError):
            cache["cache"] = None
            cache["mtime"] = None
    return cache.get("cache")


def write_json(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=False)
        f.write("\n")
