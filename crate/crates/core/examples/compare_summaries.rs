//! ROUGE, relaxed WMD and embedding F-score between two token strings.
//!
//! ```text
//! cargo run --example compare_summaries -- "tess went home" "tess walked home"
//! ```

use spinalsum::metrics::{greedy_match_fscore, relaxed_wmd, rouge_l, rouge_n, EmbeddingTable};

fn main() -> spinalsum::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cand, refr) = match args.as_slice() {
        [c, r] => (c.clone(), r.clone()),
        _ => ("the cat sat on the mat".to_string(), "the cat was on the mat".to_string()),
    };
    let c: Vec<&str> = cand.split_whitespace().collect();
    let r: Vec<&str> = refr.split_whitespace().collect();
    // Hashed vectors only make identical tokens close; pass a real table
    // through `EmbeddingTable::load` for meaningful WMD and EmbF.
    let emb = EmbeddingTable::hashed(32);
    for n in 1..=2 {
        let s = rouge_n(&c, &r, n);
        println!("ROUGE-{n}  P {:.4}  R {:.4}  F {:.4}", s.precision, s.recall, s.f1);
    }
    let l = rouge_l(&c, &r);
    println!("ROUGE-L  P {:.4}  R {:.4}  F {:.4}", l.precision, l.recall, l.f1);
    println!("WMD      {:.4}", relaxed_wmd(&c, &r, &emb)?);
    println!("EmbF     {:.4}", greedy_match_fscore(&c, &r, &emb)?.f1);
    Ok(())
}
