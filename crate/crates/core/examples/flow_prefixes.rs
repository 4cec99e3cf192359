//! Builds one branching flow by hand and lists what the models learn from
//! it: the prefix samples used for evaluation and the root-to-leaf paths
//! used for training.

use flowrec::flow::{enumerate_prefix_samples, root_to_leaf_paths, ActionKind, ActionRef, ActionVocabulary, Flow, FlowRecord};

fn main() -> anyhow::Result<()> {
    let vocab = ActionVocabulary::new(vec![
        ActionRef::new("outlook", "when_email_arrives", ActionKind::Trigger)?,
        ActionRef::new("core", "condition", ActionKind::Control)?,
        ActionRef::new("outlook", "create_event", ActionKind::Api)?,
        ActionRef::new("outlook", "send_invite", ActionKind::Api)?,
        ActionRef::new("excel", "add_row", ActionKind::Api)?,
    ])?;
    let record = FlowRecord {
        flow_id: "meeting-requests".into(),
        user_id: "ada".into(),
        nodes: [
            ("t", "outlook/when_email_arrives"),
            ("c", "core/condition"),
            ("m", "outlook/create_event"),
            ("i", "outlook/send_invite"),
            ("r", "excel/add_row"),
        ]
        .iter()
        .map(|(n, a)| (n.to_string(), a.to_string()))
        .collect(),
        edges: [("t", "c"), ("c", "m"), ("m", "i"), ("c", "r")]
            .iter()
            .map(|(p, c)| (p.to_string(), c.to_string()))
            .collect(),
    };
    let flow = Flow::from_record(record, &vocab)?;
    let name = |ids: &[flowrec::flow::ActionId]| ids.iter().map(|&a| vocab.action(a).operation.clone()).collect::<Vec<_>>().join(" > ");

    println!("prefix samples:");
    for s in enumerate_prefix_samples(&flow, &vocab)? {
        println!("  {:<45} -> {}", name(&s.prefix), vocab.action(s.target).operation);
    }
    println!("training paths:");
    for path in root_to_leaf_paths(&flow, &vocab)? {
        println!("  {}", name(&path));
    }
    println!("vocabulary hash {}", &vocab.hash_hex()[..16]);
    Ok(())
}
