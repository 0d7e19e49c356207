import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskpost.rewards import (JudgeVerdict, ProgrammaticJudge, RemoteJudge, RewardFunction,
                              combine, final_answer, format_reward, judge, overlong_shaping,
                              parse_verdict, render_judge_prompt)

GOLDEN = Path(__file__).parent / "fixtures" / "judge_prompt_golden.txt"


# -- combination -------------------------------------------------------------------

def test_reward_table_exact():
    table = {(a, f): combine(a, f) for a in (0, 1, 2) for f in (0, 1)}
    assert table == {(0, 0): 0.0, (0, 1): 0.1, (1, 0): 0.45, (1, 1): 0.55,
                     (2, 0): 0.9, (2, 1): 1.0}
    assert set(table.values()) == {0, 0.1, 0.45, 0.55, 0.9, 1.0}


def test_combine_monotone_and_bounded():
    for f in (0, 1):
        assert combine(0, f) <= combine(1, f) <= combine(2, f)
    for a in (0, 1, 2):
        assert combine(a, 0) <= combine(a, 1)
        for pen in (0.0, -0.3, -1.0):
            assert -1.0 <= combine(a, 1, pen) <= 1.0


@pytest.mark.parametrize("args", [(3, 0), (0, 2), (1, 1, 0.5), (1, 1, -1.5)])
def test_combine_rejects_bad_fields(args):
    with pytest.raises(ValueError):
        combine(*args)


# -- overlong shaping ----------------------------------------------------------------

def test_overlong_ramp_endpoints():
    assert overlong_shaping(10, 100, 20) == 0.0
    assert overlong_shaping(80, 100, 20) == 0.0
    assert overlong_shaping(90, 100, 20) == -0.5
    assert overlong_shaping(100, 100, 20) == -1.0
    assert overlong_shaping(50, 100, 20, truncated=True) == -1.0
    assert overlong_shaping(75, 100) == 0.0 and overlong_shaping(76, 100) < 0 and overlong_shaping(100, 100) == -1.0
    with pytest.raises(ValueError):
        overlong_shaping(1, 10, 10)


@given(st.integers(0, 200), st.integers(2, 100), st.data())
def test_overlong_ramp_monotone(n, max_len, data):
    buf = data.draw(st.integers(1, max_len - 1))
    a, b = overlong_shaping(n, max_len, buf), overlong_shaping(n + 1, max_len, buf)
    assert -1.0 <= b <= a <= 0.0


# -- format reward -------------------------------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("<thinking>x</thinking>answer", 1),
    ("  <thinking>x</thinking> answer", 1),
    ("<thinking></thinking>answer", 1),
    ("answer with no tags", 0),
    ("<thinking>x</thinking>", 0),
    ("<thinking>x</thinking>   \n", 0),
    ("pre <thinking>x</thinking>answer", 0),
    ("<thinking>a<thinking>b</thinking>c</thinking>answer", 0),
    ("<thinking>a</thinking><thinking>b</thinking>answer", 0),
    ("</thinking>x<thinking>answer", 0),
    ("<thinking>x answer", 0),
    ("x</thinking>answer", 0),
])
def test_format_reward_fixtures(text, expected):
    assert format_reward(text) == expected


@given(st.text().filter(lambda s: "<thinking>" not in s and "</thinking>" not in s))
def test_format_reward_ignores_interior(inner):
    assert format_reward(f"<thinking>{inner}</thinking>final") == 1


def test_final_answer():
    assert final_answer("<thinking>a</thinking> 42 ") == "42"
    assert final_answer("  plain ") == "plain"


# -- judge ----------------------------------------------------------------------------

def test_judge_prompt_golden():
    rendered = render_judge_prompt("What is the capital of Thailand?",
                                   "<thinking>recall</thinking>Bangkok", "Bangkok")
    assert rendered.encode() == GOLDEN.read_bytes()


def test_programmatic_judge_scores(tmp_path):
    (tmp_path / "aliases.json").write_text(json.dumps({"Bangkok": ["Krung Thep"]}))
    j = ProgrammaticJudge.from_json(tmp_path / "aliases.json")
    assert judge("q", "  BANGKOK\n", "bangkok", j).score == 2
    assert judge("q", "<thinking>hm</thinking>krung   thep", "Bangkok", j).score == 1
    assert judge("q", "Paris", "Bangkok", j).score == 0
    assert judge("q", "", "Bangkok", j).score == 0


def test_verdict_invariants_and_parsing():
    with pytest.raises(ValueError):
        JudgeVerdict(3, "")
    assert parse_verdict('noise {"score": 1, "explanation": "meh"} tail').score == 1
    for bad in ("nothing", '{"score": "2"}', '{"score": true}', '{"score": 1.5}',
                '{"score": 7}'):
        with pytest.raises(ValueError):
            parse_verdict(bad)


def test_garbage_judge_retries_once_then_errors():
    calls = []

    def garbage(prompt, *, response, reference):
        calls.append(prompt)
        return "I refuse to produce JSON"

    v = judge("q", "a", "a", garbage)
    assert (v.score, v.error) == (0, True)
    assert len(calls) == 2


def test_judge_recovers_on_retry():
    replies = iter(["oops", '{"score": 2, "explanation": "ok"}'])
    v = judge("q", "a", "a", lambda p, **kw: next(replies))
    assert (v.score, v.error) == (2, False)


def test_judge_requires_reference():
    with pytest.raises(ValueError):
        judge("q", "a", None)


def test_reward_function_modes():
    weighted = RewardFunction()
    r = weighted("q", "<thinking>t</thinking>yes", "yes")
    assert (r.r_acc, r.r_format, r.total) == (2, 1, 1.0)
    acc = RewardFunction(mode="accuracy")
    assert acc("q", "<thinking>t</thinking>yes", "yes").total == 1.0
    assert acc("q", "no", "yes").total == 0.0
    capped = RewardFunction(max_len=10, buffer_len=4)
    assert capped("q", "<thinking>t</thinking>yes", "yes", response_len=8).total == 0.5


# -- remote judge ---------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    replies: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.seen.append(body["prompt"])
        reply = self.replies.pop(0) if self.replies else '{"score": 0, "explanation": "x"}'
        data = reply.encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.replies, _Handler.seen = [], []
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv, _Handler
    srv.shutdown()
    srv.server_close()


def test_remote_judge_round_trip(server):
    srv, handler = server
    handler.replies = [json.dumps({"content": '{"score": 2, "explanation": "same"}'}),
                       '{"score": 1, "explanation": "close"}']
    remote = RemoteJudge(f"http://127.0.0.1:{srv.server_port}/judge", timeout=5)
    assert judge("q", "a", "a", remote).score == 2
    assert judge("q", "a", "a", remote).score == 1
    assert handler.seen[0] == render_judge_prompt("q", "a", "a")


def test_remote_judge_garbage_and_unreachable(server):
    srv, handler = server
    handler.replies = ["<html>busy</html>", "<html>busy</html>"]
    remote = RemoteJudge(f"http://127.0.0.1:{srv.server_port}/judge", timeout=5)
    assert judge("q", "a", "a", remote).error
    dead = RemoteJudge("http://127.0.0.1:9/judge", timeout=0.5)
    v = judge("q", "a", "a", dead)
    assert (v.score, v.error) == (0, True)
