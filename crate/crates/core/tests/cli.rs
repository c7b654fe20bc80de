use std::path::Path;
use std::process::Command;

fn bench(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lfm-bench"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "lfm-bench {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_run_resume_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    bench(&["synth", "--out", "w", "--users", "12", "--background-users", "20"], dir);
    let world = dir.join("w");
    for f in ["ratings.csv", "movies.csv", "registry.json", "config.toml"] {
        assert!(world.join(f).exists(), "{f}");
    }

    let first = bench(&["run", "-c", "config.toml", "--stop-after", "200"], &world);
    assert!(first.contains("incomplete"), "{first}");
    let second = bench(&["resume", "run"], &world);
    assert!(second.contains("complete"), "{second}");

    let listing = bench(&["report", "run", "--profiles", "2"], &world);
    assert!(listing.contains("== history size 10, word limit 50"));
    let report = world.join("run/report");
    for id in 2..=6 {
        assert!(report.join(format!("fig{id}.csv")).exists());
        assert!(report.join(format!("fig{id}.svg")).exists());
    }
    let svg = std::fs::read(report.join("fig3.svg")).unwrap();
    bench(&["report", "run", "--figures", "3", "--out", "again"], &world);
    assert_eq!(svg, std::fs::read(world.join("again/fig3.svg")).unwrap());
    assert!(!world.join("again/fig2.svg").exists());

    let fig2 = std::fs::read_to_string(report.join("fig2.csv")).unwrap();
    assert!(fig2.lines().count() > 1);
    assert!(fig2.contains("LFM 50") && fig2.contains("Direct") && fig2.contains("NMF bg0"));

    let prompts = bench(&["prompts", "dump", "--run", "run"], &world);
    assert!(prompts.contains("summarize[50]"));
    assert!(prompts.contains("What score out of 5 would you give"));
    let ids = bench(&["prompts", "dump", "-c", "config.toml", "--list"], &world);
    assert_eq!(ids.lines().count(), 12 * 3 * 3 * 3);
}

#[test]
fn parse_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(&["parse", "--text", "I would rate it 3.5 out of 5."], dir.path());
    assert_eq!(out.trim(), r#"{"status":"readable","value":{"score":3.5}}"#);
    let out = bench(&["parse", "--text", "a score of 3 or 4 out of 5"], dir.path());
    assert_eq!(out.trim(), r#"{"status":"unreadable"}"#);
    let out = bench(&["parse", "--task", "choice", "--text", "A"], dir.path());
    assert!(out.contains(r#""choice":"A""#));
    let patterns = bench(&["parse", "--show-patterns"], dir.path());
    assert_eq!(patterns.lines().count(), 8);
}
