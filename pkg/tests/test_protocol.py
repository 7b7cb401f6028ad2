"""Tests for framing, channels, hostile stubs, and session verification."""

import random
import socket

import pytest

from timecheck.device import attack_scenario, desk_scenario
from timecheck.engine import random_spec
from timecheck.errors import ChannelTimeout, MalformedFrame, SessionMismatch
from timecheck.field import M61
from timecheck.protocol import (
    STATUS_NMI_RETRY,
    STATUS_OK,
    STATUS_REGION_MISMATCH,
    ChallengeMessage,
    DeviceEndpoint,
    FrameDecoder,
    InProcessChannel,
    LoopbackChannel,
    ResponseMessage,
    RestoredMessage,
    TcpChannel,
    decode_body,
    encode_challenge,
    encode_response,
    encode_restored,
    issue_challenge,
    new_session_id,
    serve_device,
    verify_response,
)
from timecheck import stats
from timecheck.seeding import sub_rng


def fresh_spec(rng=None, scenario=None):
    rng = rng or random.Random(0)
    sc = scenario or desk_scenario()
    return random_spec(sc.prime, sc.k, sc.passes, rng, sc.region_id)


def feed_in_chunks(decoder, data, size):
    out = []
    for i in range(0, len(data), size):
        out.extend(decoder.feed(data[i:i + size]))
    return out


class TestFraming:
    def test_challenge_round_trip_randomized(self):
        rng = random.Random(1)
        for _ in range(200):
            p = rng.choice((13, 1009, M61))
            spec = random_spec(p, rng.randint(1, 8), rng.randint(1, 1000), rng,
                               region_id=rng.choice(("sram", "full", "x" * 40)))
            msg = ChallengeMessage(rng.getrandbits(64), spec)
            decoded = FrameDecoder().feed(encode_challenge(msg))
            assert decoded == [msg]

    def test_restored_and_response_round_trip(self):
        rng = random.Random(2)
        for _ in range(100):
            r = RestoredMessage(rng.getrandbits(64))
            assert FrameDecoder().feed(encode_restored(r)) == [r]
            resp = ResponseMessage(rng.getrandbits(64), rng.getrandbits(64),
                                   rng.choice((STATUS_OK, STATUS_NMI_RETRY,
                                               STATUS_REGION_MISMATCH)))
            assert FrameDecoder().feed(encode_response(resp)) == [resp]

    def test_incremental_reassembly(self):
        msg = ChallengeMessage(7, fresh_spec())
        raw = encode_challenge(msg)
        for size in (1, 2, 3, 5, 7, 64):
            assert feed_in_chunks(FrameDecoder(), raw, size) == [msg]

    def test_back_to_back_frames(self):
        a = encode_restored(RestoredMessage(1))
        b = encode_response(ResponseMessage(1, 2, STATUS_OK))
        out = FrameDecoder().feed(a + b)
        assert len(out) == 2

    def test_bad_magic(self):
        with pytest.raises(MalformedFrame):
            FrameDecoder().feed(b"XXXX" + b"\x00" * 16)

    def test_crc_mismatch(self):
        raw = bytearray(encode_restored(RestoredMessage(5)))
        raw[10] ^= 0xFF  # flip a body byte, CRC now stale
        with pytest.raises(MalformedFrame):
            FrameDecoder().feed(bytes(raw))

    def test_truncated_frame_waits_for_more(self):
        raw = encode_restored(RestoredMessage(5))
        dec = FrameDecoder()
        assert dec.feed(raw[:10]) == []
        assert dec.feed(raw[10:]) == [RestoredMessage(5)]

    def test_unknown_type_rejected(self):
        import struct
        import zlib

        body = bytes([99]) + b"\x00" * 8
        raw = b"TCH1" + struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))
        with pytest.raises(MalformedFrame):
            FrameDecoder().feed(raw)

    def test_oversized_frame_rejected(self):
        import struct

        with pytest.raises(MalformedFrame):
            FrameDecoder().feed(b"TCH1" + struct.pack("<I", 1 << 30))

    def test_decode_body_trailing_garbage(self):
        msg = ChallengeMessage(7, fresh_spec())
        raw = encode_challenge(msg)
        body = raw[8:-4] + b"\x00"
        with pytest.raises(MalformedFrame):
            decode_body(body)


class TestSessionIds:
    def test_unique_and_fresh(self):
        rng = random.Random(3)
        ids = {new_session_id(rng) for _ in range(2000)}
        assert len(ids) == 2000

    def test_fresh_challenge_randomness(self):
        rng = random.Random(4)
        sc = desk_scenario()
        seen = set()
        for _ in range(200):
            spec = fresh_spec(rng, sc)
            key = (spec.seeds.r, spec.perm_seed)
            assert key not in seen
            seen.add(key)


class TestChannels:
    def test_in_process_zero_jitter_exact_duration(self):
        sc = desk_scenario()
        ep = DeviceEndpoint(sc, master_seed=5)
        twin = DeviceEndpoint(sc, master_seed=5)  # replays the same noise draws
        chan = InProcessChannel(ep)
        rng = sub_rng(0, "t")
        for i in range(5):
            spec = fresh_spec(rng, sc)
            timed = issue_challenge(chan, spec, rng=rng)
            true_duration = twin.handle_challenge(ChallengeMessage(1, spec))[1][0]
            assert timed.duration_us == true_duration

    def test_loopback_jitter_bound(self):
        sc = desk_scenario()
        ep = DeviceEndpoint(sc, master_seed=6)
        jitter = 3.0
        chan = LoopbackChannel(ep, jitter_us=jitter, jitter_seed=7)
        ref = DeviceEndpoint(sc, master_seed=6)
        rng = sub_rng(1, "t")
        for i in range(40):
            spec = fresh_spec(rng, sc)
            timed = issue_challenge(chan, spec, rng=rng)
            frames = ref.handle_challenge(ChallengeMessage(1, spec))
            true_duration = frames[1][0]
            assert abs(timed.duration_us - true_duration) <= 2 * jitter

    def test_sub_tick_jitter_collapses(self):
        sc = desk_scenario()
        ep = DeviceEndpoint(sc, master_seed=8)
        chan = LoopbackChannel(ep, jitter_us=0.4, jitter_seed=9)
        rng = sub_rng(2, "t")
        spec = fresh_spec(rng, sc)
        timed = issue_challenge(chan, spec, rng=rng)
        assert timed.duration_us % 100 == 88

    def test_region_mismatch_status(self):
        sc = desk_scenario()
        ep = DeviceEndpoint(sc, master_seed=10)
        chan = InProcessChannel(ep)
        rng = sub_rng(3, "t")
        spec = random_spec(sc.prime, sc.k, sc.passes, rng, region_id="full")
        timed = issue_challenge(chan, spec, rng=rng)
        assert timed.response.status == STATUS_REGION_MISMATCH


@pytest.fixture(scope="module")
def desk_profile():
    """Loopback-calibrated baseline for the desk scenario (one per module)."""
    sc = desk_scenario()
    rng = sub_rng(4, "cal")
    cal = LoopbackChannel(DeviceEndpoint(sc, master_seed=11), jitter_us=0.4,
                          jitter_seed=12)
    durations = [issue_challenge(cal, fresh_spec(rng, sc), rng=rng).duration_us
                 for _ in range(40)]
    return sc, stats.calibrate(durations)


class TestHostileStubs:
    @pytest.fixture(autouse=True)
    def _setup(self, desk_profile):
        self.sc, self.profile = desk_profile
        self.rng = sub_rng(5, "sessions")

    def _session(self, endpoint):
        chan = LoopbackChannel(endpoint, jitter_us=0.4, jitter_seed=13)
        spec = fresh_spec(self.rng, self.sc)
        timed = issue_challenge(chan, spec, rng=self.rng)
        honest = DeviceEndpoint(self.sc, master_seed=14)
        return verify_response(honest.expected_result(spec), timed, self.profile)

    def test_stale_session_replay_detected(self):
        ep = DeviceEndpoint(self.sc, master_seed=15, behavior="stale_session")
        chan = LoopbackChannel(ep, jitter_us=0.4, jitter_seed=16)
        first = fresh_spec(self.rng, self.sc)
        issue_challenge(chan, first, rng=self.rng)  # primes the stale id
        with pytest.raises(SessionMismatch):
            issue_challenge(chan, fresh_spec(self.rng, self.sc), rng=self.rng)

    def test_wrong_result_rejected_by_value(self):
        verdict = self._session(DeviceEndpoint(self.sc, master_seed=17,
                                               behavior="wrong_result"))
        assert verdict.outcome == "REJECT" and "accumulator" in verdict.reason

    def test_delayed_response_rejected_by_timing(self):
        verdict = self._session(DeviceEndpoint(self.sc, master_seed=18,
                                               behavior="delayed", extra_delay_us=5000))
        assert verdict.outcome == "REJECT" and "timing" in verdict.reason

    def test_honest_device_accepted(self):
        verdict = self._session(DeviceEndpoint(self.sc, master_seed=19))
        assert verdict.outcome == "ACCEPT"

    def test_value_check_precedes_timing(self):
        # wrong value at a perfectly normal time: REJECT for the value
        ep = DeviceEndpoint(self.sc, master_seed=20, behavior="wrong_result")
        verdict = self._session(ep)
        assert verdict.outcome == "REJECT"
        assert verdict.detector is None

    def test_attack_kinds_rejected(self):
        for kind in ("dram", "iomem", "mmc"):
            ep = DeviceEndpoint(attack_scenario(self.sc, kind), master_seed=21)
            verdict = self._session(ep)
            assert verdict.outcome == "REJECT", kind

    def test_nmi_asks_for_retry(self):
        from dataclasses import replace

        spiky = replace(self.sc, noise=replace(self.sc.noise, nmi_prob=1.0,
                                               nmi_us=50_000.0))
        ep = DeviceEndpoint(spiky, master_seed=22)
        chan = LoopbackChannel(ep, jitter_us=0.4, jitter_seed=23)
        spec = fresh_spec(self.rng, self.sc)
        timed = issue_challenge(chan, spec, rng=self.rng)
        honest = DeviceEndpoint(self.sc, master_seed=24)
        verdict = verify_response(honest.expected_result(spec), timed, self.profile)
        assert verdict.outcome == "RETRY"


class TestTcpTransport:
    def test_round_trip_over_sockets(self):
        sc = desk_scenario()
        ep = DeviceEndpoint(sc, master_seed=25)
        server, thread = serve_device(ep, port=0, time_scale=0.0)
        host, port = server.getsockname()
        try:
            chan = TcpChannel(host, port, timeout_s=5.0)
            rng = sub_rng(5, "t")
            spec = fresh_spec(rng, sc)
            timed = issue_challenge(chan, spec, rng=rng)
            assert timed.response.status == STATUS_OK
            honest = DeviceEndpoint(sc, master_seed=26)
            assert timed.response.accumulator == honest.expected_result(spec).accumulator
        finally:
            server.close()

    def test_unreachable_target(self):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            dead_port = probe.getsockname()[1]
        chan = TcpChannel("127.0.0.1", dead_port, timeout_s=0.5)
        with pytest.raises(ChannelTimeout):
            chan.request(encode_challenge(ChallengeMessage(1, fresh_spec())))


def test_timed_response_ordering_enforced():
    from timecheck.protocol import TimedResponse

    with pytest.raises(ValueError):
        TimedResponse(ResponseMessage(1, 2, STATUS_OK), t_start_us=10, t_end_us=9)


def test_measurement_from_timed_session():
    from timecheck.protocol import TimedResponse, measurement_from_timed

    sc = desk_scenario()
    spec = fresh_spec(scenario=sc)
    timed = TimedResponse(ResponseMessage(1, 2, STATUS_NMI_RETRY), 100, 12488)
    m = measurement_from_timed(timed, trial_id=3, scenario=sc.name, spec=spec)
    assert m.duration_us == 12388 and m.nmi and m.spec_digest == spec.digest()
