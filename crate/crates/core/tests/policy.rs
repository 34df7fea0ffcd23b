mod common;

use std::net::Ipv4Addr;

use common::{reference_decision, reference_in_block, GRID_PRINCIPALS, GRID_RULES, GRID_SOURCES};
use ice_core::policy::{evaluate, parse_rules, AccessContext, Channel, Cidr, Decision};
use proptest::prelude::*;

#[test]
fn three_rule_grid_matches_reference_evaluator() {
    let rules = parse_rules(GRID_RULES).unwrap();
    let mut checked = 0;
    let mut allowed = 0;
    for principal in GRID_PRINCIPALS {
        for source in GRID_SOURCES {
            for channel in Channel::ALL {
                let got = evaluate(&rules, &AccessContext::new(principal, source, channel));
                let want = reference_decision(GRID_RULES, principal, source, &channel.to_string());
                assert_eq!(got, want, "{principal} {source} {channel}");
                checked += 1;
                allowed += (got == Decision::Allow) as usize;
            }
        }
    }
    assert_eq!(checked, 24);
    // ops@10.1.2.3/control and ops@192.168.7.200/data
    assert_eq!(allowed, 2);
}

fn rule_line() -> impl Strategy<Value = String> {
    let action = prop_oneof![Just("allow"), Just("deny")];
    let principal = prop_oneof![Just("*"), Just("ops"), Just("mallory"), Just("alice")];
    let source = prop_oneof![
        Just("*".to_owned()),
        (any::<[u8; 4]>(), 0u8..=32).prop_map(|(o, l)| format!("{}/{l}", Ipv4Addr::from(o))),
        (0u8..4).prop_map(|i| GRID_SOURCES[i as usize].to_string()),
        (16u8..=32).prop_map(|l| format!("10.1.0.0/{l}")),
    ];
    let channel = prop_oneof![Just("control"), Just("data"), Just("registry")];
    (action, principal, source, channel).prop_map(|(a, p, s, c)| format!("{a} {p} {s} {c}"))
}

fn source_addr() -> impl Strategy<Value = Ipv4Addr> {
    prop_oneof![
        any::<[u8; 4]>().prop_map(Ipv4Addr::from),
        (0u8..4).prop_map(|i| GRID_SOURCES[i as usize]),
        any::<u16>().prop_map(|lo| Ipv4Addr::new(10, 1, (lo >> 8) as u8, lo as u8)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn random_rule_lists_agree_with_reference(
        lines in prop::collection::vec(rule_line(), 0..8),
        principal in prop_oneof![Just("ops"), Just("mallory"), Just("alice"), Just("bob")],
        source in source_addr(),
        channel in prop::sample::select(Channel::ALL.to_vec()),
    ) {
        let text = lines.join("\n");
        let rules = parse_rules(&text).unwrap();
        prop_assert_eq!(
            evaluate(&rules, &AccessContext::new(principal, source, channel)),
            reference_decision(&text, principal, source, &channel.to_string())
        );
    }

    #[test]
    fn first_matching_rule_decides(
        lines in prop::collection::vec(rule_line(), 0..6),
        source in source_addr(),
        channel in prop::sample::select(Channel::ALL.to_vec()),
    ) {
        // prepending a catch-all for the context fixes the outcome
        let ctx = AccessContext::new("ops", source, channel);
        for (head, want) in [("allow", Decision::Allow), ("deny", Decision::Deny)] {
            let text = format!("{head} ops {source} {channel}\n{}", lines.join("\n"));
            prop_assert_eq!(evaluate(&parse_rules(&text).unwrap(), &ctx), want);
        }
    }

    #[test]
    fn cidr_containment_matches_bit_prefix(net in any::<[u8; 4]>(), len in 24u8..=32, host in any::<u8>(), other in any::<[u8; 4]>()) {
        let net = Ipv4Addr::from(net);
        let block = Cidr::new(net, len).unwrap();
        let text = format!("{net}/{len}");
        let [a, b, c, _] = net.octets();
        for addr in [Ipv4Addr::new(a, b, c, host), Ipv4Addr::from(other), net] {
            prop_assert_eq!(block.contains(addr), reference_in_block(&text, addr), "{} in {}", addr, text);
        }
    }
}

#[test]
fn every_host_of_small_blocks_is_classified_exactly() {
    let net = Ipv4Addr::new(172, 16, 5, 77);
    for len in 24..=32u8 {
        let block = Cidr::new(net, len).unwrap();
        let text = format!("{net}/{len}");
        for third in [4u8, 5, 6] {
            for host in 0..=255u8 {
                let addr = Ipv4Addr::new(172, 16, third, host);
                assert_eq!(
                    block.contains(addr),
                    reference_in_block(&text, addr),
                    "{addr} in {text}"
                );
            }
        }
        let inside = (0..=255u8)
            .filter(|&h| block.contains(Ipv4Addr::new(172, 16, 5, h)))
            .count();
        assert_eq!(inside, 1 << (32 - len));
    }
}

#[test]
fn empty_rule_list_denies_everything() {
    let rules = parse_rules("# nothing but a comment\n\n").unwrap();
    assert!(rules.is_empty());
    for channel in Channel::ALL {
        let ctx = AccessContext::new("ops", Ipv4Addr::LOCALHOST, channel);
        assert_eq!(evaluate(&rules, &ctx), Decision::Deny);
    }
}
