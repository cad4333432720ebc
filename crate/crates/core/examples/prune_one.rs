use std::sync::Arc;

use eog_core::{
    embedding::{EmbeddingCache, ReferenceEmbedder},
    kg::load_graph,
    pruning::prune,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = load_graph(vec![vec!["Chile", "location.country.languages_spoken", "Spanish Language"]])?;
    let cache = EmbeddingCache::<f64>::new(Arc::new(ReferenceEmbedder::default()));
    let pruned = prune(&g, &["What language is spoken in Chile?".to_string()], &cache, 300)?;
    for s in &pruned.kept {
        println!("{:.4} {}", s.total, s.triple.compact());
    }
    Ok(())
}
