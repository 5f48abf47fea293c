mod common;

use std::collections::BTreeSet;

use conceptscope_core::annotation::{
    build_pack, protocol_report, AnnotationRecord, ConditionGroup, PackConfig, Pattern, RecordSet,
};
use conceptscope_core::EmbeddingStore;
use proptest::prelude::*;

fn stores(n: usize) -> Vec<EmbeddingStore> {
    ["qqp", "qnli", "wiki", "books"]
        .iter()
        .enumerate()
        .map(|(i, tag)| {
            let s = common::gaussian_store(n, 12, i as u64, tag);
            let texts: Vec<String> = (0..n).map(|j| format!("{tag} text {j}")).collect();
            common::with_texts(&s, &texts)
        })
        .collect()
}

fn record(task: &str, who: &str, members: Option<usize>) -> AnnotationRecord {
    AnnotationRecord {
        task_id: task.into(),
        annotator_id: who.into(),
        patterns: members
            .map(|m| vec![Pattern { description: "p".into(), members: (0..m).collect() }])
            .unwrap_or_default(),
        no_pattern: members.is_none(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn task_files_are_blind(neurons in 0usize..5, dirs in 0usize..4, sets in 0usize..4, seed in any::<u64>()) {
        prop_assume!(neurons + dirs + sets > 0);
        let pack = build_pack(&stores(30), &PackConfig { neurons, random_directions: dirs, random_sets: sets, k: 10, seed }).unwrap();
        prop_assert_eq!(pack.tasks.len(), 4 * (neurons + dirs + sets));
        let text = pack.tasks_jsonl().unwrap();
        let mut shapes = BTreeSet::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let obj = v.as_object().unwrap();
            let keys: Vec<&String> = obj.keys().collect();
            let sentence_keys: BTreeSet<Vec<String>> = obj["sentences"].as_array().unwrap().iter()
                .map(|s| s.as_object().unwrap().keys().cloned().collect()).collect();
            prop_assert_eq!(obj["sentences"].as_array().unwrap().len(), 10);
            shapes.insert((format!("{keys:?}"), format!("{sentence_keys:?}")));
        }
        prop_assert_eq!(shapes.len(), 1);
        for word in ["neuron", "random", "seed", "condition", "kind"] {
            prop_assert!(!text.contains(word));
        }
        let again = build_pack(&stores(30), &PackConfig { neurons, random_directions: dirs, random_sets: sets, k: 10, seed }).unwrap();
        prop_assert_eq!(pack, again);
    }

    #[test]
    fn report_cells_sum_and_ignore_record_order(
        outcomes in prop::collection::vec((prop::option::of(1usize..8), prop::option::of(1usize..8), any::<bool>()), 12),
        seed in any::<u64>(),
    ) {
        let pack = build_pack(&stores(30), &PackConfig { neurons: 1, random_directions: 1, random_sets: 1, k: 10, seed }).unwrap();
        let mut recs = Vec::new();
        let mut doubly = 0;
        for (t, (a, b, second)) in pack.tasks.iter().zip(&outcomes) {
            recs.push(record(&t.task_id, "a", *a));
            if *second {
                recs.push(record(&t.task_id, "b", *b));
                doubly += 1;
            }
        }
        let build = |order: &[AnnotationRecord]| {
            let mut set = RecordSet::new(&pack.tasks);
            for r in order {
                set.insert(r.clone()).unwrap();
            }
            protocol_report(&pack.tasks, &set, &pack.key, 2).unwrap()
        };
        let report = build(&recs);
        let pooled: usize = report.cells.iter().filter(|c| c.dataset == "all").map(|c| c.tasks).sum();
        prop_assert_eq!(pooled, doubly);
        for c in &report.cells {
            prop_assert_eq!(c.yes + c.no + c.conflicting, c.tasks);
        }
        prop_assert_eq!(report.excluded.len(), 12 - doubly);
        let mut reversed = recs.clone();
        reversed.reverse();
        prop_assert_eq!(&report, &build(&reversed));

        // hand count of the pooled neuron cell
        let valid = |m: &Option<usize>| m.is_some_and(|m| m >= 3);
        let mut expected = [0usize; 3];
        for (t, (a, b, second)) in pack.tasks.iter().zip(&outcomes) {
            let cond = pack.key.iter().find(|k| k.task_id == t.task_id).unwrap().condition.group();
            if !second || cond != ConditionGroup::Neuron {
                continue;
            }
            let slot = match (valid(a), valid(b)) {
                (true, true) => 0,
                (false, false) => 1,
                _ => 2,
            };
            expected[slot] += 1;
        }
        let cell = report.cells.iter().find(|c| c.condition == ConditionGroup::Neuron && c.dataset == "all").unwrap();
        prop_assert_eq!([cell.yes, cell.no, cell.conflicting], expected);
    }
}
