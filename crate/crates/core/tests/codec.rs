//! Wire codecs against packets captured from an independent encoder
//! (fixtures/gen_fixtures.py builds them with scapy), plus round-trip
//! properties and a fuzz pass over random buffers.

use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use colaboot_core::netproto::{
    is_pxe_client, opt, BootOp, DhcpMessage, DhcpOption, MacAddr, TftpErrorCode, TftpOption,
    TftpPacket, TftpRequest, BLKSIZE_MAX,
};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn fixtures(prefix: &str) -> Vec<(String, Vec<u8>, Value)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|bin| {
            let json: Value = serde_json::from_slice(&fs::read(bin.with_extension("json")).unwrap()).unwrap();
            let name = bin.file_stem().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&bin).unwrap(), json)
        })
        .collect()
}

fn ip(v: &Value) -> Ipv4Addr {
    v.as_str().unwrap().parse().unwrap()
}

#[test]
fn dhcp_fixtures_decode_and_reencode_exactly() {
    let all = fixtures("dhcp_");
    assert_eq!(all.len(), 5);
    for (name, raw, j) in all {
        let m = DhcpMessage::decode(&raw).unwrap_or_else(|e| panic!("{name}: {e}"));
        let op = match m.op {
            BootOp::Request => 1,
            BootOp::Reply => 2,
        };
        assert_eq!(op, j["op"].as_u64().unwrap(), "{name}");
        assert_eq!(m.xid as u64, j["xid"].as_u64().unwrap(), "{name}");
        assert_eq!(m.flags as u64, j["flags"].as_u64().unwrap(), "{name}");
        assert_eq!(m.client_mac(), j["mac"].as_str().unwrap().parse::<MacAddr>().unwrap(), "{name}");
        assert_eq!(m.ciaddr, ip(&j["ciaddr"]), "{name}");
        assert_eq!(m.yiaddr, ip(&j["yiaddr"]), "{name}");
        assert_eq!(m.siaddr, ip(&j["siaddr"]), "{name}");
        assert_eq!(m.giaddr, ip(&j["giaddr"]), "{name}");
        assert_eq!(m.file_name(), j["file"].as_str().unwrap(), "{name}");
        assert_eq!(m.msg_type().map(|t| t as u64), j["msg_type"].as_u64(), "{name}");
        assert_eq!(is_pxe_client(&m), j["pxe"].as_bool().unwrap(), "{name}");
        let tags: Vec<u64> = m.options.iter().map(|o| o.tag as u64).collect();
        let expect: Vec<u64> = j["options"].as_array().unwrap().iter().map(|t| t.as_u64().unwrap()).collect();
        assert_eq!(tags, expect, "{name}");
        if let Some(a) = j.get("arch") {
            assert_eq!(m.client_arch().unwrap().code as u64, a.as_u64().unwrap(), "{name}");
        }
        if let Some(s) = j.get("server_id") {
            assert_eq!(m.option_ipv4(opt::SERVER_ID), Some(ip(s)), "{name}");
        }
        if let Some(r) = j.get("requested") {
            assert_eq!(m.option_ipv4(opt::REQUESTED_IP), Some(ip(r)), "{name}");
        }
        if let Some(t) = j.get("lease_time") {
            let v = m.option(opt::LEASE_TIME).unwrap();
            assert_eq!(u32::from_be_bytes(v.try_into().unwrap()) as u64, t.as_u64().unwrap(), "{name}");
        }
        if let Some(s) = j.get("secs") {
            assert_eq!(m.secs as u64, s.as_u64().unwrap(), "{name}");
        }
        if let Some(h) = j.get("hops") {
            assert_eq!(m.hops as u64, h.as_u64().unwrap(), "{name}");
        }
        assert_eq!(m.encode().unwrap(), raw, "{name} re-encode");
    }
}

#[test]
fn tftp_fixtures_decode_and_reencode_exactly() {
    let all = fixtures("tftp_");
    assert_eq!(all.len(), 9);
    for (name, raw, j) in all {
        let p = TftpPacket::decode(&raw).unwrap_or_else(|e| panic!("{name}: {e}"));
        let options = |v: &Value| -> Vec<TftpOption> {
            v.as_array()
                .map(|a| {
                    a.iter()
                        .map(|kv| TftpOption::new(kv[0].as_str().unwrap(), kv[1].as_str().unwrap()))
                        .collect()
                })
                .unwrap_or_default()
        };
        match (j["op"].as_str().unwrap(), &p) {
            ("rrq", TftpPacket::Rrq(r)) | ("wrq", TftpPacket::Wrq(r)) => {
                assert_eq!(r.filename, j["filename"].as_str().unwrap(), "{name}");
                assert_eq!(r.mode, j["mode"].as_str().unwrap(), "{name}");
                assert_eq!(r.options, options(&j["options"]), "{name}");
            }
            ("data", TftpPacket::Data { block, payload }) => {
                assert_eq!(*block as u64, j["block"].as_u64().unwrap(), "{name}");
                assert_eq!(payload.len() as u64, j["payload_len"].as_u64().unwrap(), "{name}");
                // The generator fills DATA payloads with 0, 1, 2, ...
                assert!(payload.iter().enumerate().all(|(i, &b)| b == i as u8), "{name}");
            }
            ("ack", TftpPacket::Ack { block }) => {
                assert_eq!(*block as u64, j["block"].as_u64().unwrap(), "{name}");
            }
            ("error", TftpPacket::Error { code, message }) => {
                assert_eq!(*code as u64, j["code"].as_u64().unwrap(), "{name}");
                assert_eq!(message, j["message"].as_str().unwrap(), "{name}");
            }
            ("oack", TftpPacket::Oack { options: o }) => {
                assert_eq!(*o, options(&j["options"]), "{name}");
            }
            (op, other) => panic!("{name}: expected {op}, decoded {other:?}"),
        }
        assert_eq!(p.encode().unwrap(), raw, "{name} re-encode");
    }
}

fn arb_dhcp() -> impl Strategy<Value = DhcpMessage> {
    let tag = (1u8..=254).prop_filter("reserved or typed", |t| *t != opt::OVERLOAD && *t != opt::MESSAGE_TYPE);
    let option = (tag, prop::collection::vec(any::<u8>(), 0..=255)).prop_map(|(t, p)| DhcpOption::new(t, p));
    let header = (
        prop_oneof![Just(BootOp::Request), Just(BootOp::Reply)],
        any::<(u8, u8, u8, u32, u16, u16)>(),
        any::<[u32; 4]>(),
        any::<[u8; 16]>(),
    );
    let fields = (
        prop::collection::vec(any::<u8>(), 64),
        prop::collection::vec(any::<u8>(), 128),
        prop::option::of(1u8..=8),
        prop::collection::vec(option, 0..12),
    );
    (header, fields).prop_map(|((op, (htype, hlen, hops, xid, secs, flags), addrs, chaddr), (sname, file, mt, mut options))| {
        if let Some(code) = mt {
            options.insert(0, DhcpOption::new(opt::MESSAGE_TYPE, [code]));
        }
        DhcpMessage {
            op,
            htype,
            hlen,
            hops,
            xid,
            secs,
            flags,
            ciaddr: addrs[0].into(),
            yiaddr: addrs[1].into(),
            siaddr: addrs[2].into(),
            giaddr: addrs[3].into(),
            chaddr,
            sname: sname.try_into().unwrap(),
            file: file.try_into().unwrap(),
            options,
        }
    })
}

fn text() -> impl Strategy<Value = String> {
    "[^\u{0}]{0,40}"
}

fn tftp_options() -> impl Strategy<Value = Vec<TftpOption>> {
    prop::collection::vec((text(), text()).prop_map(|(name, value)| TftpOption { name, value }), 0..5)
}

fn tftp_request() -> impl Strategy<Value = TftpRequest> {
    (text(), text(), tftp_options()).prop_map(|(filename, mode, options)| TftpRequest { filename, mode, options })
}

fn arb_tftp() -> impl Strategy<Value = TftpPacket> {
    let code = (0u16..=8).prop_map(|c| TftpErrorCode::from_code(c).unwrap());
    prop_oneof![
        tftp_request().prop_map(TftpPacket::Rrq),
        tftp_request().prop_map(TftpPacket::Wrq),
        (any::<u16>(), prop::collection::vec(any::<u8>(), 0..2048)).prop_map(|(block, payload)| TftpPacket::Data { block, payload }),
        any::<u16>().prop_map(|block| TftpPacket::Ack { block }),
        (code, text()).prop_map(|(code, message)| TftpPacket::Error { code, message }),
        tftp_options().prop_map(|options| TftpPacket::Oack { options }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dhcp_round_trip(m in arb_dhcp()) {
        let raw = m.encode().unwrap();
        prop_assert!(raw.len() >= 300);
        prop_assert_eq!(DhcpMessage::decode(&raw).unwrap(), m);
    }

    #[test]
    fn tftp_round_trip(p in arb_tftp()) {
        let raw = p.encode().unwrap();
        prop_assert_eq!(TftpPacket::decode(&raw).unwrap(), p);
    }
}

#[test]
fn max_data_payload_round_trips() {
    let p = TftpPacket::Data { block: 1, payload: vec![0xa5; BLKSIZE_MAX as usize] };
    assert_eq!(TftpPacket::decode(&p.encode().unwrap()).unwrap(), p);
    let too_big = TftpPacket::Data { block: 1, payload: vec![0; BLKSIZE_MAX as usize + 1] };
    assert!(too_big.encode().is_err());
}

#[test]
fn random_buffers_never_panic_either_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut accepted = (0, 0);
    for i in 0..10_000 {
        let len = rng.random_range(0..700);
        let mut buf = vec![0u8; len];
        rng.fill_bytes(&mut buf);
        // Give half the DHCP inputs a valid cookie and op so the option
        // walker gets exercised, not just the header checks.
        if i % 2 == 0 && len >= 240 {
            buf[0] = 1 + (buf[0] & 1);
            buf[236..240].copy_from_slice(&[99, 130, 83, 99]);
        }
        if let Ok(m) = DhcpMessage::decode(&buf) {
            accepted.0 += 1;
            let _ = m.encode();
        }
        // Likewise steer TFTP inputs onto valid opcodes.
        if i % 2 == 0 && len >= 2 {
            buf[0] = 0;
            buf[1] = 1 + buf[1] % 6;
        }
        if let Ok(p) = TftpPacket::decode(&buf) {
            accepted.1 += 1;
            let _ = p.encode();
        }
    }
    assert!(accepted.0 > 0 && accepted.1 > 0, "{accepted:?}");
}
