use fan_core::abi::{host_table, ALL_CAPABILITIES, HOST_TABLE_SIZE, SCRATCH_LEN};
use fan_core::cell::{LinkCell, RelayPayload, PAYLOAD_LEN, RELAY_DATA_LEN};
use fan_core::crypto::{Direction, TestProvider};
use fan_core::onion::{onion_unwrap_layer, onion_wrap, recognize, stamp_digest, HopKeys};
use fan_core::relay::HostContext;
use fan_core::toolkit::assemble;
use fan_core::vm::{disassemble, instantiate, verify, Instruction, Program, RunError, VerifiedProgram, MIN_MEMORY};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

mod common;

proptest! {
    #[test]
    fn instruction_bytes_round_trip(b in any::<[u8; 8]>()) {
        let i = Instruction::decode(&b);
        prop_assert_eq!(i.encode(), b);
    }

    #[test]
    fn disassembly_reassembles(words in prop::collection::vec(any::<[u8; 8]>(), 1..40)) {
        let bytes: Vec<u8> = words.concat();
        let program = Program::parse(&bytes).unwrap();
        prop_assert_eq!(assemble(&disassemble(&program)).unwrap(), bytes);
    }

    #[test]
    fn verified_programs_never_escape(seed in any::<u64>(), gas in 1u64..20_000) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let program = common::program(&mut rng, MIN_MEMORY as u32);
        prop_assert!(verify(&program, HOST_TABLE_SIZE).is_ok());
        let verified = VerifiedProgram::new(program, HOST_TABLE_SIZE).unwrap();
        let mut vm = instantiate(&verified, MIN_MEMORY, host_table(), ALL_CAPABILITIES).unwrap();
        vm.arena().enable_probe();
        let mut host_rng = ChaCha20Rng::seed_from_u64(seed);
        let mut host = HostContext::new(0, [0; SCRATCH_LEN], &mut host_rng);
        let r = vm.run(0, &[], gas, &mut host);
        prop_assert!(matches!(r, Ok(_) | Err(RunError::Trap(_))));
        prop_assert!(vm.gas_used() <= gas);
        for a in vm.arena().take_probe() {
            prop_assert_eq!(a.allowed, a.addr as u128 + a.len as u128 <= MIN_MEMORY as u128);
        }
    }

    #[test]
    fn arbitrary_bytecode_is_verified_or_runs_safely(words in prop::collection::vec(any::<[u8; 8]>(), 1..32)) {
        let program = Program::parse(&words.concat()).unwrap();
        if let Ok(verified) = VerifiedProgram::new(program, HOST_TABLE_SIZE) {
            let mut vm = instantiate(&verified, MIN_MEMORY, host_table(), 0).unwrap();
            let mut host_rng = ChaCha20Rng::seed_from_u64(0);
            let mut host = HostContext::new(0, [0; SCRATCH_LEN], &mut host_rng);
            let r = vm.run(0, &[], 5_000, &mut host);
            prop_assert!(matches!(r, Ok(_) | Err(RunError::Trap(_))));
        }
    }

    #[test]
    fn link_cells_round_trip(circ_id in any::<u32>(), command in any::<u8>(), body in prop::collection::vec(any::<u8>(), PAYLOAD_LEN)) {
        let cell = LinkCell::from_parts(circ_id, command, &body).unwrap();
        prop_assert_eq!(LinkCell::decode(&cell.encode()).unwrap(), cell);
    }

    #[test]
    fn onion_reaches_only_the_destination(
        keys in prop::collection::vec(any::<[u8; 32]>(), 1..=5),
        dest_pick in any::<prop::sample::Index>(),
        cmd in any::<u8>(),
        data in prop::collection::vec(any::<u8>(), 0..=RELAY_DATA_LEN),
    ) {
        let p = &TestProvider;
        let dest = dest_pick.index(keys.len());
        let mut client: Vec<HopKeys> = keys.iter().copied().map(HopKeys::new).collect();
        let mut payload = RelayPayload::new(cmd, 1, &data).unwrap();
        stamp_digest(p, &mut payload, &mut client[dest], Direction::Forward);
        let mut buf = onion_wrap(p, &payload, &mut client[..=dest], Direction::Forward).unwrap();
        for (h, k) in keys.iter().enumerate().take(dest + 1) {
            let mut relay = HopKeys::new(*k);
            onion_unwrap_layer(p, &mut buf, &mut relay, Direction::Forward).unwrap();
            prop_assert_eq!(recognize(p, &buf, &mut relay, Direction::Forward), h == dest);
        }
        prop_assert_eq!(buf, payload.encode());
    }
}
