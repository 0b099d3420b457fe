mod common;

use std::path::Path;

use common::{ok, s, slicewise, stderr, stdout, synth};
use slicewise::agent::protocol::{format_reply, Tool};
use slicewise::agent::{CannedClient, SessionTranscript};

fn cohort(root: &Path) -> std::path::PathBuf {
    synth(&root.join("cases"), 60, true);
    let manifest = root.join("manifest.jsonl");
    ok(&["qagen", "--cases-dir", s(&root.join("cases")), "--out", s(&manifest), "--target", "2"]);
    manifest
}

fn manifest_len(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn oracle_agent_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cohort(dir.path());
    let n = manifest_len(&manifest);
    assert!(n >= 20);
    let out = dir.path().join("run");
    let cases = dir.path().join("cases");
    ok(&["agent", "--manifest", s(&manifest), "--cases-dir", s(&cases), "--out", s(&out), "--client", "oracle"]);
    let answers = out.join("answers.jsonl");
    assert_eq!(manifest_len(&answers), n);
    assert_eq!(std::fs::read_dir(out.join("transcripts")).unwrap().count(), n);

    let summary = dir.path().join("summary.json");
    let ev = ok(&[
        "eval", "--manifest", s(&manifest), "--answers", s(&answers), "--group-by", "type", "--json", s(&summary),
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(v["report"]["invalid"], 0);
    assert_eq!(v["report"]["total_macro_subtypes"], 1.0);
    let groups = v["report"]["groups"]["type"].as_object().unwrap();
    assert_eq!(groups.len(), 3);
    for row in groups.values() {
        assert_eq!(row["n"], row["correct"]);
    }
    assert!(stdout(&ev).contains("by type:"));
}

#[test]
fn canned_replay_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cohort(dir.path());
    let cases = dir.path().join("cases");
    let script = dir.path().join("script.json");
    let client = CannedClient::script(vec![
        format_reply("look at the candidate", "A", &[0], &[], Some((Tool::MaskOverlay, 12, None))),
        format_reply("settled", "B", &[0, 1], &[], None),
    ]);
    std::fs::write(&script, serde_json::to_string(&client).unwrap()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "agent", "--manifest", s(&manifest), "--cases-dir", s(&cases), "--out", s(&out), "--client", "canned",
            "--script", s(&script), "--limit", "6",
        ]);
        let mut digests = vec![];
        let mut paths: Vec<_> = std::fs::read_dir(out.join("transcripts")).unwrap().map(|e| e.unwrap().path()).collect();
        paths.sort();
        for p in paths {
            let t: SessionTranscript = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
            assert_eq!(t.turns.len(), 2);
            assert_eq!(t.final_answer.as_deref(), Some("B"));
            digests.push(t.digest());
        }
        (digests, std::fs::read_to_string(out.join("answers.jsonl")).unwrap())
    };
    let (a, answers) = run("a");
    let (b, _) = run("b");
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(answers.lines().count(), 6);
}

#[test]
fn unreachable_endpoint_fails_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cohort(dir.path());
    let out = dir.path().join("run");
    let res = slicewise(&[
        "agent", "--manifest", s(&manifest), "--cases-dir", s(&dir.path().join("cases")), "--out", s(&out),
        "--client", "http", "--endpoint", "http://127.0.0.1:9/v1", "--limit", "2",
    ]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("2 failed"), "{}", stderr(&res));
}

#[test]
fn eval_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cohort(dir.path());
    let rand = ok(&["eval", "--manifest", s(&manifest), "--assert-rand", "--trials", "4000"]);
    assert!(!stdout(&rand).contains("FAIL"));
    let missing = slicewise(&["eval", "--manifest", s(&manifest), "--answers", s(&dir.path().join("nope.jsonl"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("nope.jsonl"));
}
