//! The best top-k accuracy any prefix-only model can reach: for each
//! distinct prefix, the k most frequent continuations in the test set.

use flowrec::flow::{ActionId, PrefixSample};
use flowrec::oracle::ContinuationTable;

fn main() -> anyhow::Result<()> {
    // one prefix continued by a once, b twice and c three times
    let samples: Vec<PrefixSample> = [3, 4, 4, 5, 5, 5]
        .iter()
        .enumerate()
        .map(|(i, &t)| PrefixSample {
            user_id: format!("u{i}"),
            flow_id: format!("f{i}"),
            prefix: vec![ActionId(2)],
            target: ActionId(t),
        })
        .collect();
    let table = ContinuationTable::new(&samples)?;
    for k in 1..=3 {
        println!("k={k}: {:.4}", table.accuracy(k)?);
    }
    Ok(())
}
