//! Checks against frozen reference vectors produced by
//! `golden/gen_reference.py`, an independent implementation of the wire
//! formats and the test provider. Each check panics on mismatch.

use std::sync::Arc;

use fan_core::cell::{LinkCell, RelayPayload, PAYLOAD_LEN};
use fan_core::crypto::{fnv1a64, splitmix64, CryptoProvider, Direction, TestProvider, FNV_OFFSET_BASIS};
use fan_core::onion::{onion_unwrap_layer, onion_wrap, recognize, stamp_digest, HopKeys};
use fan_core::vm::{instantiate, HostTable, NoHost, Program, VerifiedProgram, DEFAULT_GAS, MIN_MEMORY};
use serde_json::Value;

fn vectors() -> Value {
    serde_json::from_str(include_str!("../golden/vectors.json")).unwrap()
}

fn unhex(v: &Value) -> Vec<u8> {
    hex::decode(v.as_str().unwrap()).unwrap()
}

fn key32(v: &Value) -> [u8; 32] {
    unhex(v).try_into().unwrap()
}

fn payload(v: &Value) -> [u8; PAYLOAD_LEN] {
    unhex(v).try_into().unwrap()
}

fn dir(forward: bool) -> Direction {
    if forward {
        Direction::Forward
    } else {
        Direction::Backward
    }
}

pub fn fnv_and_splitmix() {
    let v = vectors();
    for case in v["fnv1a64"].as_array().unwrap() {
        assert_eq!(fnv1a64(&unhex(&case["input_hex"])), case["value"].as_u64().unwrap());
    }
    for case in v["splitmix64"].as_array().unwrap() {
        assert_eq!(splitmix64(case["input"].as_u64().unwrap()), case["value"].as_u64().unwrap());
    }
}

pub fn keystream_blocks() {
    let v = vectors();
    for case in v["keystream"].as_array().unwrap() {
        let mut buf = [0u8; PAYLOAD_LEN];
        let d = dir(case["forward"].as_bool().unwrap());
        TestProvider.stream_xor(&key32(&case["key_hex"]), d, case["counter"].as_u64().unwrap(), &mut buf);
        assert_eq!(hex::encode(buf), case["hex"].as_str().unwrap());
    }
    let mut first = [0u8; 8];
    TestProvider.stream_xor(&[0; 32], Direction::Forward, 0, &mut first);
    assert_eq!(u64::from_le_bytes(first), v["first_block_zero_key_forward"].as_u64().unwrap());
}

pub fn seal_and_open() {
    let v = &vectors()["seal"];
    let id: [u8; 16] = unhex(&v["relay_id_hex"]).try_into().unwrap();
    let pt = unhex(&v["plaintext_hex"]);
    let sealed = TestProvider.seal(&id, &pt);
    assert_eq!(hex::encode(&sealed), v["sealed_hex"].as_str().unwrap());
    assert_eq!(TestProvider.open(&id, &sealed), pt);
}

pub fn link_cell_encoding() {
    let v = vectors();
    for case in v["link_cells"].as_array().unwrap() {
        let cell = LinkCell::new(
            case["circ_id"].as_u64().unwrap() as u32,
            case["command"].as_u64().unwrap() as u8,
            payload(&case["payload_hex"]),
        );
        let encoded = unhex(&case["encoded_hex"]);
        assert_eq!(cell.encode().to_vec(), encoded);
        assert_eq!(LinkCell::decode(&encoded).unwrap(), cell);
    }
}

pub fn relay_payload_encoding() {
    let v = &vectors()["relay_payload"];
    let mut p = RelayPayload::new(
        v["relay_cmd"].as_u64().unwrap() as u8,
        v["stream_id"].as_u64().unwrap() as u16,
        &unhex(&v["data_hex"]),
    )
    .unwrap();
    p.recognized = v["recognized"].as_u64().unwrap() as u16;
    p.digest = v["digest"].as_u64().unwrap() as u32;
    let encoded = payload(&v["encoded_hex"]);
    assert_eq!(p.encode(), encoded);
    assert_eq!(RelayPayload::decode(&encoded), p);
}

pub fn running_digest() {
    let v = &vectors()["digest"];
    assert_eq!(v["initial_state"].as_u64().unwrap(), FNV_OFFSET_BASIS);
    let mut p = RelayPayload::decode(&payload(&v["payload_hex"]));
    let mut keys = HopKeys::new([0; 32]);
    stamp_digest(&TestProvider, &mut p, &mut keys, Direction::Forward);
    assert_eq!(u64::from(p.digest), v["digest"].as_u64().unwrap());
    assert_eq!(keys.digest_state(Direction::Forward), v["state_after"].as_u64().unwrap());
    let signed = payload(&v["signed_payload_hex"]);
    assert_eq!(p.encode(), signed);

    let mut receiver = HopKeys::new([0; 32]);
    assert!(recognize(&TestProvider, &signed, &mut receiver, Direction::Forward));
    assert_eq!(receiver.digest_state(Direction::Forward), v["state_after"].as_u64().unwrap());
}

pub fn three_hop_onion() {
    let v = &vectors()["onion_3hop"];
    let keys: Vec<[u8; 32]> = v["keys_hex"].as_array().unwrap().iter().map(key32).collect();
    let mut client: Vec<HopKeys> = keys.iter().copied().map(HopKeys::new).collect();
    let mut p = RelayPayload::decode(&payload(&v["payload_hex"]));
    stamp_digest(&TestProvider, &mut p, &mut client[2], Direction::Forward);
    assert_eq!(u64::from(p.digest), v["digest"].as_u64().unwrap());
    let wrapped = onion_wrap(&TestProvider, &p, &mut client, Direction::Forward).unwrap();
    assert_eq!(hex::encode(wrapped), v["wrapped_hex"].as_str().unwrap());

    let mut buf = wrapped;
    for (i, k) in keys.iter().enumerate() {
        let mut relay = HopKeys::new(*k);
        onion_unwrap_layer(&TestProvider, &mut buf, &mut relay, Direction::Forward).unwrap();
        let hit = recognize(&TestProvider, &buf, &mut relay, Direction::Forward);
        assert_eq!(hit, i == 2, "hop {}", i + 1);
        if hit {
            assert_eq!(relay.digest_state(Direction::Forward), v["hop3_state_after"].as_u64().unwrap());
        }
    }
}

pub fn vm_programs() {
    let v = vectors();
    for case in v["vm_programs"].as_array().unwrap() {
        let program = Program::parse(&unhex(&case["code_hex"])).unwrap();
        let verified = VerifiedProgram::new(program, 0).unwrap();
        let mut vm = instantiate(&verified, MIN_MEMORY, Arc::new(HostTable::new(Vec::new())), 0).unwrap();
        let r0 = vm.run(0, &[], DEFAULT_GAS, &mut NoHost).unwrap();
        let name = case["name"].as_str().unwrap();
        assert_eq!(r0, case["result"].as_u64().unwrap(), "{name}");
        assert_eq!(vm.gas_used(), case["gas_used"].as_u64().unwrap(), "{name}");
    }
}

pub const ALL: [(&str, fn()); 8] = [
    ("fnv1a64 and splitmix64", fnv_and_splitmix),
    ("keystream", keystream_blocks),
    ("seal", seal_and_open),
    ("link cells", link_cell_encoding),
    ("relay payload", relay_payload_encoding),
    ("running digest", running_digest),
    ("3-hop onion", three_hop_onion),
    ("vm programs", vm_programs),
];
