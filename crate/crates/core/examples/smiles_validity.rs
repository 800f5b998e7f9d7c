//! Tokenization, validity checks and native descriptors for a few SMILES.

use qtransformer::smiles::{check_validity, descriptors, MolGraph, Vocabulary};

fn main() -> qtransformer::Result<()> {
    let vocab = Vocabulary::qm9();
    for smiles in ["O=[N+]([O-])c1ccoc1", "CC(=O)O", "C1CC1C#N", "c1cccc1", "C(C)(C)(C)(C)C", "CC(", "C1CC"] {
        let tokens = match vocab.tokenize(smiles) {
            Ok(ids) => ids.iter().map(|&i| vocab.token(i).unwrap_or("?")).collect::<Vec<_>>().join(" "),
            Err(e) => format!("({e})"),
        };
        println!("{smiles:<22} {}", check_validity(smiles));
        println!("    tokens: {tokens}");
        if let Ok(graph) = MolGraph::from_smiles(smiles) {
            if check_validity(smiles).is_valid() {
                let d = descriptors(&graph);
                println!(
                    "    MW {:.2} HBA {} HBD {} nRot {} nRing {} nHet {}",
                    d.mw, d.hba, d.hbd, d.n_rot, d.n_ring, d.n_het
                );
            }
        }
    }
    Ok(())
}
