//! Head spines for one bracketed parse.
//!
//! ```text
//! cargo run --example spines -- "(S (NP (NNP Tess)) (VP (VBD went) (ADVP (RB home))) (. .))"
//! ```

use spinalsum::treebank::{derive_spines, parse_ptb, HeadTable};

const DEFAULT: &str = "(S (NP (PRP$ Her) (NN mother)) (VP (VBD had) (VP (VBN advised) (NP (PRP her)) \
    (S (VP (TO to) (VP (VB stay) (ADVP (RB here))))))) (. .))";

fn main() -> spinalsum::Result<()> {
    let text = std::env::args().nth(1).unwrap_or_else(|| DEFAULT.to_string());
    let tree = parse_ptb(&text)?.strip_root();
    let spines = derive_spines(&tree, &HeadTable::collins());
    for (token, spine) in tree.tokens().iter().zip(&spines) {
        println!("{token:<12} {spine}");
    }
    Ok(())
}
