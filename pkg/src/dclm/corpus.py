"""Dialog corpora: parsing, folder splits, vocabularies and K-turn windows.

Corpus files hold one JSON dialog per line::

    {"dialog_id": "sw0001_4325",
     "turns": [{"speaker": "A",
                "utterances": [{"tokens": [...], "pos": [...], "da": "sd"}]}]}
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
EOT = "<eot>"
UNK_ID = 0
EOT_ID = 1
MAX_TURN_LEN = 160

TRAIN_FOLDERS = tuple(f"sw{i:02d}" for i in range(0, 10))
VALID_FOLDERS = ("sw11", "sw12", "sw13")
TEST_FOLDERS = ("sw10",)


class CorpusError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class CorpusWarning(UserWarning):
    pass


@dataclass
class Utterance:
    tokens: list[str]
    pos_tags: list[str]
    da_tag: str

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("utterance has no tokens")
        if len(self.pos_tags) != len(self.tokens):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.pos_tags)} POS tags")


@dataclass
class Turn:
    speaker: str
    utterances: list[Utterance]

    def __post_init__(self):
        if self.speaker not in ("A", "B"):
            raise ValueError(f"speaker must be 'A' or 'B', got {self.speaker!r}")
        if not self.utterances:
            raise ValueError("turn has no utterances")

    @property
    def tokens(self) -> list[str]:
        return [tok for u in self.utterances for tok in u.tokens]


@dataclass
class Dialog:
    dialog_id: str
    turns: list[Turn]

    def to_json(self) -> dict:
        return {"dialog_id": self.dialog_id,
                "turns": [{"speaker": t.speaker,
                           "utterances": [{"tokens": u.tokens, "pos": u.pos_tags, "da": u.da_tag}
                                          for u in t.utterances]}
                          for t in self.turns]}


def _dialog_from_record(rec, lineno: int) -> Dialog:
    if not isinstance(rec, dict):
        raise CorpusError(lineno, "record is not a JSON object")
    did = rec.get("dialog_id")
    if not isinstance(did, str) or not did:
        raise CorpusError(lineno, "missing or empty dialog_id")
    raw_turns = rec.get("turns")
    if not isinstance(raw_turns, list) or not raw_turns:
        raise CorpusError(lineno, "dialog has no turns")
    turns: list[Turn] = []
    for ti, rt in enumerate(raw_turns):
        try:
            utts = [Utterance([tok.lower() for tok in ru["tokens"]], list(ru["pos"]), str(ru["da"]))
                    for ru in rt["utterances"]]
            turn = Turn(rt["speaker"], utts)
        except (KeyError, TypeError, AttributeError) as err:
            raise CorpusError(lineno, f"turn {ti}: malformed field {err}") from None
        except ValueError as err:
            raise CorpusError(lineno, f"turn {ti}: {err}") from None
        if turns and turns[-1].speaker == turn.speaker:
            warnings.warn(f"line {lineno}: dialog {did} has consecutive turns by speaker "
                          f"{turn.speaker}; merging turn {ti} into the previous turn",
                          CorpusWarning, stacklevel=3)
            turns[-1].utterances.extend(turn.utterances)
        else:
            turns.append(turn)
    return Dialog(did, turns)


def parse_corpus(lines: Iterable[str]) -> list[Dialog]:
    """Parse line-delimited JSON dialogs; blank lines are skipped."""
    dialogs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise CorpusError(lineno, f"invalid JSON ({err.msg})") from None
        dialogs.append(_dialog_from_record(rec, lineno))
    return dialogs


def read_corpus(path) -> list[Dialog]:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh)


def write_corpus(path, dialogs: Iterable[Dialog]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogs:
            fh.write(json.dumps(d.to_json(), ensure_ascii=False) + "\n")


def folder_of(dialog_id: str) -> str:
    return dialog_id[:4]


def split_by_folder(dialogs: Sequence[Dialog], train_folders=TRAIN_FOLDERS,
                    valid_folders=VALID_FOLDERS, test_folders=TEST_FOLDERS):
    """Split into (train, valid, test) by the ``swNN`` folder prefix of each dialog id."""
    train, valid, test = [], [], []
    for d in dialogs:
        folder = folder_of(d.dialog_id)
        if folder in train_folders:
            train.append(d)
        elif folder in valid_folders:
            valid.append(d)
        elif folder in test_folders:
            test.append(d)
        else:
            raise ValueError(f"dialog {d.dialog_id!r}: unknown folder prefix {folder!r}")
    return train, valid, test


# ---------------------------------------------------------------------------
# vocabularies


class Vocabulary:
    """Bidirectional symbol/id map with ``<unk>`` = 0 and ``<eot>`` = 1."""

    def __init__(self, symbols: Sequence[str]):
        self.id_to_token = [UNK, EOT] + [s for s in symbols if s not in (UNK, EOT)]
        self.token_to_id = {s: i for i, s in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate symbols in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode_all(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, idx: int) -> str:
        return self.id_to_token[idx]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @classmethod
    def from_counts(cls, counts: Counter, cap: int | None = None) -> Vocabulary:
        # most frequent first, ties broken lexicographically
        ranked = sorted((t for t in counts if t not in (UNK, EOT)), key=lambda t: (-counts[t], t))
        if cap is not None:
            ranked = ranked[:cap]
        return cls(ranked)


@dataclass
class Lexicon:
    """Word vocabulary plus the POS and dialog-act tag inventories."""

    words: Vocabulary
    pos: Vocabulary
    da: Vocabulary

    def to_json(self) -> dict:
        return {"words": self.words.id_to_token[2:], "pos": self.pos.id_to_token[2:],
                "da": self.da.id_to_token[2:]}

    @classmethod
    def from_json(cls, obj: dict) -> Lexicon:
        return cls(Vocabulary(obj["words"]), Vocabulary(obj["pos"]), Vocabulary(obj["da"]))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> Lexicon:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_vocab(train: Sequence[Dialog], cap: int = 10000) -> Lexicon:
    """Keep the ``cap`` most frequent training words; tag sets are kept whole."""
    if not train:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words, pos, da = Counter(), Counter(), Counter()
    for d in train:
        for t in d.turns:
            for u in t.utterances:
                words.update(u.tokens)
                pos.update(u.pos_tags)
                da[u.da_tag] += 1
    return Lexicon(Vocabulary.from_counts(words, cap), Vocabulary.from_counts(pos),
                   Vocabulary.from_counts(da))


# ---------------------------------------------------------------------------
# encoded turns and windows


@dataclass
class EncodedTurn:
    """Token ids ending in ``<eot>`` with aligned POS and DA ids.

    ``da`` gives, per token, the dialog act of its utterance (``<eot>``
    sentinel on the final position); ``da_list`` is the utterance-level
    dialog-act sequence of the turn.
    """

    speaker: str
    ids: np.ndarray
    pos: np.ndarray
    da: np.ndarray
    da_list: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class DialogWindow:
    dialog_id: str
    context_turns: list[EncodedTurn]
    target_turn: EncodedTurn
    start: int = 0

    @property
    def turns(self) -> list[EncodedTurn]:
        return self.context_turns + [self.target_turn]

    @property
    def k(self) -> int:
        return len(self.context_turns) + 1


def encode_turn(turn: Turn, lex: Lexicon, max_turn_len: int = MAX_TURN_LEN) -> EncodedTurn:
    ids, pos, da, da_list = [], [], [], []
    for u in turn.utterances:
        room = max_turn_len - len(ids)
        if room <= 0:
            break
        toks = u.tokens[:room]
        d = lex.da.encode(u.da_tag)
        ids.extend(lex.words.encode_all(toks))
        pos.extend(lex.pos.encode_all(u.pos_tags[:room]))
        da.extend([d] * len(toks))
        da_list.append(d)
    ids.append(EOT_ID)
    pos.append(EOT_ID)
    da.append(EOT_ID)
    return EncodedTurn(turn.speaker, np.array(ids, dtype=np.int64), np.array(pos, dtype=np.int64),
                       np.array(da, dtype=np.int64), np.array(da_list, dtype=np.int64))


def decode_turn(turn: EncodedTurn, lex: Lexicon) -> list[str]:
    return [lex.words.decode(i) for i in turn.ids[:-1]]


def make_windows(dialogs: Sequence[Dialog], k: int, lex: Lexicon,
                 max_turn_len: int = MAX_TURN_LEN) -> list[DialogWindow]:
    """All stride-1 windows of ``k`` consecutive turns within each dialog."""
    if k < 1:
        raise ValueError("K must be at least 1")
    windows = []
    for d in dialogs:
        enc = [encode_turn(t, lex, max_turn_len) for t in d.turns]
        for start in range(len(enc) - k + 1):
            windows.append(DialogWindow(d.dialog_id, enc[start:start + k - 1],
                                        enc[start + k - 1], start))
    return windows


# ---------------------------------------------------------------------------
# SwDA CSV conversion

# Bracketing and disfluency markup found in the SwDA ``pos`` column.
_MARKUP = {"{", "}", "[", "]", "+", "{C", "{D", "{E", "{F", "{A", "((", "))", "-", "--", "#"}


def _pos_tokens(pos_field: str) -> tuple[list[str], list[str]]:
    tokens, tags = [], []
    for item in pos_field.split():
        if item in _MARKUP or "/" not in item:
            continue
        word, tag = item.rsplit("/", 1)
        if not word or tag == "-NONE-":
            continue
        tokens.append(word.lower())
        tags.append(tag)
    return tokens, tags


def collapse_act_tag(tag: str) -> str:
    """Strip SwDA secondary markers (``^x``, ``(...)``, ``@``, ``*``) from a DAMSL tag."""
    tag = tag.strip()
    for sep in ("^", "(", ";"):
        if sep in tag and not tag.startswith(sep):
            tag = tag.split(sep, 1)[0]
    return tag.rstrip("@*").strip() or tag


def convert_swda_rows(rows: Iterable[dict]) -> list[Dialog]:
    """Group SwDA utterance rows into dialogs of speaker turns.

    Expected columns: ``swda_filename``, ``conversation_no``, ``caller``,
    ``act_tag``, ``pos`` (plus ``transcript_index`` for ordering when
    present).  The dialog id is ``<folder>_<conversation_no>`` where the
    folder (``sw00`` ... ``sw13``) comes from the file path.
    """
    by_dialog: dict[str, list[tuple[int, dict]]] = {}
    for n, row in enumerate(rows):
        folder = row["swda_filename"].replace("\\", "/").split("/")[0][:4]
        did = f"{folder}_{row['conversation_no']}"
        order = int(row.get("transcript_index") or n)
        by_dialog.setdefault(did, []).append((order, row))
    dialogs = []
    for did in sorted(by_dialog):
        turns: list[Turn] = []
        for _, row in sorted(by_dialog[did], key=lambda x: x[0]):
            tokens, tags = _pos_tokens(row.get("pos") or "")
            if not tokens:
                continue
            utt = Utterance(tokens, tags, collapse_act_tag(row["act_tag"]))
            speaker = row["caller"].strip()
            if turns and turns[-1].speaker == speaker:
                turns[-1].utterances.append(utt)
            else:
                turns.append(Turn(speaker, [utt]))
        if turns:
            dialogs.append(Dialog(did, turns))
    return dialogs


def convert_swda_csv(paths: Sequence) -> list[Dialog]:
    rows = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            rows.extend(csv.DictReader(fh))
    return convert_swda_rows(rows)
