//! The two post-hoc personalizations applied to one hand-written
//! distribution: restricting to connections the user has used, and
//! reweighting by how often the user used each action.

use flowrec::flow::{ActionKind, ActionRef, ActionVocabulary};
use flowrec::personalize::{filter_by_connections, reweight_by_actions, seen_connections, DEFAULT_BETA};

fn main() -> anyhow::Result<()> {
    let vocab = ActionVocabulary::new(vec![
        ActionRef::new("outlook", "when_email_arrives", ActionKind::Trigger)?,
        ActionRef::new("core", "condition", ActionKind::Control)?,
        ActionRef::new("outlook", "send_email", ActionKind::Api)?,
        ActionRef::new("slack", "post_message", ActionKind::Api)?,
        ActionRef::new("excel", "add_row", ActionKind::Api)?,
    ])?;
    // ids 0 and 1 are reserved, 2 is the trigger
    let dist = [0.0, 0.0, 0.0, 0.1, 0.2, 0.4, 0.3];
    let mut counts = vec![0u32; vocab.size()];
    counts[vocab.lookup("outlook/send_email").unwrap().index()] = 6;
    counts[vocab.lookup("excel/add_row").unwrap().index()] = 2;

    let seen = seen_connections(&counts, &vocab);
    let filtered = filter_by_connections(&dist, &seen, &vocab);
    let reweighted = reweight_by_actions(&dist, &counts, DEFAULT_BETA)?;
    println!("used connections: {seen:?}");
    println!("{:<22} {:>6} {:>9} {:>11}", "action", "model", "filtered", "reweighted");
    for (id, action) in vocab.iter().skip(1) {
        let i = id.index();
        println!("{:<22} {:>6.3} {:>9.3} {:>11.3}", action.name(), dist[i], filtered[i], reweighted[i]);
    }
    Ok(())
}
