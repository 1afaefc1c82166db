//! Seeded random scenarios over a small package pool.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::irm::monitors::{OPEN_CONNECTION, SEND_TEXT_MESSAGE};
use crate::middleware::{ContentStoreConfig, StackConfig};
use crate::model::{Component, ComponentKind, Intent, LocationFix, PackageInfo};

use super::{EventSpec, Scenario};

const PACKAGES: [&str; 5] = ["com.gen.alpha", "com.gen.beta", "com.gen.gamma", "com.gen.delta", "com.gen.eps"];
const PERMISSIONS: [&str; 5] = ["INTERNET", "LOCATION", "READ_CONTACTS", "RECEIVE_SMS", "CAMERA"];
const ACTIONS: [&str; 3] = ["PING", "BOOT_COMPLETED", "SYNC_DONE"];
const GROUPS: [&str; 3] = ["work", "private", "family"];

/// Stack the generated scenarios are meant for: a contacts store and one
/// location fix.
pub fn standard_stack_config() -> StackConfig {
    let rows = [("ann", "work"), ("bob", "private"), ("cy", "work"), ("dee", "family"), ("eve", "private")];
    StackConfig::default().with_fix(LocationFix::new(49.8728, 8.6512, 1)).with_store(ContentStoreConfig {
        name: "contacts".into(),
        columns: vec!["name".into(), "group".into()],
        rows: rows.iter().map(|(n, g)| vec![json!(n), json!(g)]).collect(),
    })
}

fn random_package(rng: &mut ChaCha8Rng, name: &str) -> PackageInfo {
    let perms: Vec<&str> = PERMISSIONS.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
    let mut pkg = PackageInfo::new(name)
        .with_permissions(perms)
        .with_component(Component::new(ComponentKind::Activity, "Main").with_actions(["MAIN", "VIEW"]))
        .with_component(Component::new(ComponentKind::Service, "Sync").with_actions(["SYNC"]));
    if rng.gen_bool(0.6) {
        let action = *ACTIONS.choose(rng).unwrap();
        pkg = pkg.with_component(Component::new(ComponentKind::Receiver, "Rx").with_actions([action]));
    }
    pkg
}

fn random_intent(rng: &mut ChaCha8Rng, actions: &[&str], kind_name: &str) -> Intent {
    let mut intent = Intent::new(*actions.choose(rng).unwrap());
    if rng.gen_bool(0.3) {
        intent = intent.targeting(format!("{}/{kind_name}", PACKAGES.choose(rng).unwrap()));
    }
    if rng.gen_bool(0.2) {
        intent = intent.requiring(*PERMISSIONS.choose(rng).unwrap());
    }
    intent
}

/// A fixed mix of everyday activity: browsing, texting, location lookups,
/// contacts, clipboard and an install/uninstall cycle.
pub fn daily_tasks_scenario() -> Scenario {
    let browser = PackageInfo::new("com.daily.browser")
        .with_permissions(["INTERNET"])
        .with_component(Component::new(ComponentKind::Activity, "Main").with_actions(["MAIN", "VIEW"]))
        .with_component(Component::new(ComponentKind::Receiver, "Rx").with_actions(["CONNECTIVITY"]));
    let messenger = PackageInfo::new("com.daily.sms")
        .with_permissions(["SEND_SMS", "READ_CONTACTS", "RECEIVE_SMS"])
        .with_component(Component::new(ComponentKind::Activity, "Main").with_actions(["MAIN", "SENDTO"]))
        .with_component(Component::new(ComponentKind::Service, "Sync").with_actions(["SYNC"]))
        .with_component(Component::new(ComponentKind::Receiver, "Rx").with_actions(["CONNECTIVITY"]));
    let maps = PackageInfo::new("com.daily.maps")
        .with_permissions(["LOCATION", "INTERNET"])
        .with_component(Component::new(ComponentKind::Activity, "Main").with_actions(["MAIN"]));
    let game = PackageInfo::new("com.daily.game").with_permissions(["INTERNET"]);
    let (b, m, g) = ("com.daily.browser", "com.daily.sms", "com.daily.maps");
    let mut events = vec![
        EventSpec::Install { package: browser },
        EventSpec::Install { package: messenger },
        EventSpec::Install { package: maps },
        EventSpec::Spawn { package: b.into(), receivers: vec!["CONNECTIVITY".into()] },
        EventSpec::Spawn { package: m.into(), receivers: vec!["CONNECTIVITY".into()] },
        EventSpec::Spawn { package: g.into(), receivers: vec![] },
    ];
    let mut selection = serde_json::Map::new();
    selection.insert("group".into(), json!("work"));
    for round in 0..4 {
        events.extend([
            EventSpec::StartActivity { app: m.into(), intent: Intent::new("VIEW") },
            EventSpec::Invoke {
                app: b.into(),
                method: OPEN_CONNECTION.into(),
                args: vec![json!(format!("http://news{round}.example"))],
            },
            EventSpec::CheckPermission {
                app: b.into(),
                permission: "INTERNET".into(),
                owner: m.into(),
                exported: true,
            },
            EventSpec::QueryContent { app: m.into(), store: "contacts".into(), selection: selection.clone() },
            EventSpec::Invoke {
                app: m.into(),
                method: SEND_TEXT_MESSAGE.into(),
                args: vec![json!("+4961511"), json!("on my way")],
            },
            EventSpec::BindService { app: b.into(), intent: Intent::new("SYNC") },
            EventSpec::ReportLocation {
                latitude: 49.87 + round as f64 * 0.001,
                longitude: 8.65,
                timestamp: 10 + round,
            },
            EventSpec::GetLocation { app: g.into() },
            EventSpec::GetProviders { app: g.into() },
            EventSpec::Broadcast { app: b.into(), intent: Intent::new("CONNECTIVITY") },
            EventSpec::ClipSet { app: b.into(), text: format!("link {round}") },
            EventSpec::ClipGet { app: m.into() },
            EventSpec::GetDeviceId { app: m.into() },
            EventSpec::GetInstalled { app: g.into() },
            EventSpec::CheckPermission {
                app: g.into(),
                permission: "READ_CONTACTS".into(),
                owner: m.into(),
                exported: false,
            },
        ]);
    }
    events.extend([EventSpec::Install { package: game }, EventSpec::Uninstall { package: "com.daily.game".into() }]);
    Scenario::new("daily-tasks", 0, events)
}

/// `max_events` bounds the scenario length; the length itself is random.
pub fn random_scenario(seed: u64, max_events: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(1..=max_events.max(1));
    let mut installed: Vec<&str> = Vec::new();
    let mut running: Vec<&str> = Vec::new();
    let mut events = Vec::with_capacity(len);
    while events.len() < len {
        let roll = rng.gen_range(0..100);
        let app = running.choose(&mut rng).copied();
        let event = if installed.is_empty() || roll < 15 {
            let name = *PACKAGES.choose(&mut rng).unwrap();
            if !installed.contains(&name) {
                installed.push(name);
            }
            EventSpec::Install { package: random_package(&mut rng, name) }
        } else if let Some(a) = app {
            match roll {
                15..=19 => {
                    let package = *installed.choose(&mut rng).unwrap();
                    running.push(package);
                    EventSpec::Spawn { package: package.to_owned(), receivers: vec!["PING".into()] }
                }
                20..=22 => {
                    let package = *installed.choose(&mut rng).unwrap();
                    installed.retain(|p| *p != package);
                    running.retain(|p| *p != package);
                    EventSpec::Uninstall { package: package.to_owned() }
                }
                23..=24 => {
                    running.retain(|p| *p != a);
                    EventSpec::Exit { app: a.to_owned() }
                }
                25..=34 => EventSpec::Broadcast { app: a.to_owned(), intent: random_intent(&mut rng, &ACTIONS, "Rx") },
                35..=39 => EventSpec::StartActivity {
                    app: a.to_owned(),
                    intent: random_intent(&mut rng, &["MAIN", "VIEW", "EDIT"], "Main"),
                },
                40..=44 => {
                    EventSpec::BindService { app: a.to_owned(), intent: random_intent(&mut rng, &["SYNC"], "Sync") }
                }
                45..=49 => EventSpec::CheckPermission {
                    app: a.to_owned(),
                    permission: PERMISSIONS.choose(&mut rng).unwrap().to_string(),
                    owner: installed.choose(&mut rng).unwrap().to_string(),
                    exported: rng.gen_bool(0.5),
                },
                50..=54 => EventSpec::GetLocation { app: a.to_owned() },
                55..=57 => EventSpec::GetProviders { app: a.to_owned() },
                58..=59 => EventSpec::RequestLocationUpdates {
                    app: a.to_owned(),
                    provider: ["gps", "network", "bogus"].choose(&mut rng).unwrap().to_string(),
                },
                60..=63 => EventSpec::ReportLocation {
                    latitude: rng.gen_range(-90.0..=90.0),
                    longitude: rng.gen_range(-180.0..=180.0),
                    timestamp: events.len() as u64,
                },
                64..=71 => {
                    let mut selection = serde_json::Map::new();
                    if rng.gen_bool(0.5) {
                        selection.insert("group".into(), json!(GROUPS.choose(&mut rng).unwrap()));
                    }
                    let store = if rng.gen_bool(0.9) { "contacts" } else { "calendar" };
                    EventSpec::QueryContent { app: a.to_owned(), store: store.into(), selection }
                }
                72..=75 => EventSpec::GetDeviceId { app: a.to_owned() },
                76..=79 => EventSpec::ClipGet { app: a.to_owned() },
                80..=83 => EventSpec::ClipSet { app: a.to_owned(), text: format!("clip-{}", rng.gen_range(0..100)) },
                84..=88 => EventSpec::GetInstalled { app: a.to_owned() },
                89..=90 => {
                    let mut bundle = serde_json::Map::new();
                    bundle.insert("cmd".into(), json!("getOps"));
                    EventSpec::CallModule { bundle, uid: crate::model::SHELL_UID }
                }
                91..=94 => EventSpec::Invoke {
                    app: a.to_owned(),
                    method: OPEN_CONNECTION.into(),
                    args: vec![json!(format!("http://site{}.example", rng.gen_range(0..5)))],
                },
                _ => {
                    let target = PACKAGES.choose(&mut rng).unwrap();
                    EventSpec::FileAccess {
                        app: a.to_owned(),
                        path: format!("/data/data/{target}"),
                        op: ["read", "write", "open"].choose(&mut rng).unwrap().to_string(),
                    }
                }
            }
        } else {
            let package = *installed.choose(&mut rng).unwrap();
            running.push(package);
            let receivers =
                if rng.gen_bool(0.5) { vec![ACTIONS.choose(&mut rng).unwrap().to_string()] } else { vec![] };
            EventSpec::Spawn { package: package.to_owned(), receivers }
        };
        events.push(event);
    }
    Scenario::new(format!("random-{seed}"), seed, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn daily_tasks_is_valid() {
        let s = daily_tasks_scenario();
        s.validate_structure().unwrap();
        s.validate_references(&standard_stack_config()).unwrap();
    }

    #[test]
    fn generation_is_seeded_and_valid() {
        for seed in 0..50 {
            let a = random_scenario(seed, 40);
            assert_eq!(a, random_scenario(seed, 40));
            assert!(a.events.len() <= 40);
            a.validate_references(&standard_stack_config()).unwrap();
        }
    }
}
