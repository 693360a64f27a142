//! The `slapforge` binary driven as a user would.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use slapforge_core::fixtures;

fn slapforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slapforge"))
        .current_dir(dir)
        .env_remove("SLAPFORGE_SEED")
        .env_remove("SLAPFORGE_STATE")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn bundled_run_completes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = slapforge(dir.path(), &["run", "boinc-e2e", "--trace", "a.log"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let text = stdout(&first);
    assert!(text.contains("work units: 5 done, 0 error, 5 total"), "{text}");
    assert!(text.contains("denials: 0"), "{text}");

    let second = slapforge(dir.path(), &["run", "boinc-e2e", "--trace", "b.log"]);
    assert_eq!(code(&second), 0);
    let (a, b) = (fs::read(dir.path().join("a.log")).unwrap(), fs::read(dir.path().join("b.log")).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn seed_from_environment_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    let flag = slapforge(dir.path(), &["run", "boinc-e2e", "--seed", "7", "--trace", "flag.log"]);
    assert_eq!(code(&flag), 0);
    let env = Command::new(env!("CARGO_BIN_EXE_slapforge"))
        .current_dir(dir.path())
        .env("SLAPFORGE_SEED", "7")
        .args(["run", "boinc-e2e", "--trace", "env.log"])
        .output()
        .unwrap();
    assert_eq!(code(&env), 0);
    assert_eq!(fs::read(dir.path().join("flag.log")).unwrap(), fs::read(dir.path().join("env.log")).unwrap());
}

#[test]
fn incomplete_run_is_a_domain_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = slapforge(dir.path(), &["run", "boinc-e2e", "--ticks", "0", "--trace", "t.log"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&slapforge(dir.path(), &["run", "no-such-scenario"])), 2);
    assert_eq!(code(&slapforge(dir.path(), &["run"])), 2);
    assert_eq!(code(&slapforge(dir.path(), &["invoice", "--user", "u", "--from", "5", "--to", "4"])), 2);
    assert_eq!(code(&slapforge(dir.path(), &["policy", "fuzz", "--partitions", "1"])), 2);
    fs::write(dir.path().join("bad.cfg"), "[a]\nx = 1\nx = 2\n").unwrap();
    assert_eq!(code(&slapforge(dir.path(), &["profile", "lint", "bad.cfg"])), 2);
}

#[test]
fn policy_fuzz_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let on = slapforge(dir.path(), &["policy", "fuzz", "--seed", "2012", "--n", "1000", "--partitions", "8"]);
    assert_eq!(code(&on), 0);
    assert_eq!(stdout(&on).trim(), "0 allowed, 1000 denied");
    let off = slapforge(dir.path(), &["policy", "fuzz", "--seed", "2012", "--confinement", "off"]);
    assert_eq!(code(&off), 0);
    assert_eq!(stdout(&off).trim(), "1000 allowed, 0 denied");
}

#[test]
fn profile_lint_and_plan_of_a_local_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("profiles")).unwrap();
    fs::write(
        dir.path().join("profiles/base.cfg"),
        "[buildout]\nparts =\n  first\n  second\n\n[first]\nrecipe = plone.recipe.command\ncommand = echo ${second:location}\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("profiles/top.cfg"),
        "[buildout]\nextends = base.cfg\n\n[second]\nrecipe = plone.recipe.command\ncommand = echo ${slap-parameter:greeting}\n",
    )
    .unwrap();
    let lint = slapforge(dir.path(), &["profile", "lint", "profiles/top.cfg", "--param", "greeting=hi"]);
    assert_eq!(code(&lint), 0, "{}", String::from_utf8_lossy(&lint.stderr));
    assert!(stdout(&lint).starts_with("ok: "), "{}", stdout(&lint));
    assert!(stdout(&lint).trim_end().ends_with("2 parts"), "{}", stdout(&lint));

    let plan = slapforge(dir.path(), &["profile", "plan", "profiles/top.cfg", "--partition", "3", "--param", "greeting=hi"]);
    assert_eq!(code(&plan), 0, "{}", String::from_utf8_lossy(&plan.stderr));
    let text = stdout(&plan);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[0].contains("\"first\""), "{text}");
    assert!(lines[0].contains("/srv/slapgrid/slappart3/parts/second"), "{text}");
    assert!(lines[1].contains("echo hi"), "{text}");
}

#[test]
fn stepwise_provisioning_and_billing() {
    let dir = tempfile::tempdir().unwrap();
    let ok = |args: &[&str]| {
        let out = slapforge(dir.path(), args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };
    let release = fixtures::boinc_release();
    ok(&["--state", "s.json", "node", "prepare", "--node", "n1", "--partitions", "2", "--confinement", "on", "--mode", "strict"]);
    ok(&["--state", "s.json", "supply", "--node", "n1", &release]);
    let requested = ok(&["--state", "s.json", "request", "--requester", "alice", "--reference", "db", "--type", "mariadb", &release]);
    let id = requested.split_whitespace().next().unwrap().to_string();
    ok(&["--state", "s.json", "node", "run", "--ticks", "10", "--trace", "t.log"]);
    let status = ok(&["--state", "s.json", "status", "--requester", "alice"]);
    let line = status.lines().find(|l| l.starts_with(&id)).unwrap_or_else(|| panic!("{status}"));
    assert!(line.to_lowercase().contains("running"), "{line}");
    assert!(line.contains("n1/slappart"), "{line}");
    assert!(ok(&["--state", "s.json", "status", "--requester", "bob"]).lines().count() == 1);

    let billed: u64 = ok(&["--state", "s.json", "invoice", "--user", "alice", "--from", "0", "--to", "10"]).trim().parse().unwrap();
    assert!(billed > 0 && billed < 10, "{billed}");
    let nothing = ok(&["--state", "s.json", "invoice", "--user", "bob", "--from", "0", "--to", "10"]);
    assert_eq!(nothing.trim(), "0");

    let audit = ok(&["policy", "audit", "--trace", "t.log"]);
    assert!(audit.trim_end().ends_with(" 0 denied"), "{audit}");
    let dump = ok(&["--state", "s.json", "node", "dump", "--node", "n1"]);
    assert!(dump.contains(&id), "{dump}");
    assert_eq!(code(&slapforge(dir.path(), &["--state", "s.json", "node", "dump", "--node", "ghost"])), 2);
}
