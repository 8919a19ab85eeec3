use tsfuse_core::caption::{assemble_dataset, AssembleOptions, CaptionerKind};
use tsfuse_core::diversity::{metric_tokenize, mtld, self_bleu4, MTLD_TTR_THRESHOLD};

#[test]
fn probe_diversity_gap() {
    let template = assemble_dataset(&AssembleOptions::offline(500, 500, CaptionerKind::Template, 77)).unwrap();
    let aware = assemble_dataset(&AssembleOptions::offline(500, 500, CaptionerKind::Aware, 78)).unwrap();
    let t_tok: Vec<Vec<String>> = template.records.iter().map(|r| metric_tokenize(&r.caption)).collect();
    let a_tok: Vec<Vec<String>> = aware.records.iter().map(|r| metric_tokenize(&r.caption)).collect();
    let mtld_t = mtld(&t_tok, MTLD_TTR_THRESHOLD).unwrap();
    let mtld_a = mtld(&a_tok, MTLD_TTR_THRESHOLD).unwrap();
    let sb_t = self_bleu4(&t_tok, Some(120)).unwrap();
    let sb_a = self_bleu4(&a_tok, Some(120)).unwrap();
    eprintln!("MTLD template={mtld_t:.2} aware={mtld_a:.2} ratio={:.2}", mtld_a / mtld_t);
    eprintln!("SelfBLEU template={sb_t:.3} aware={sb_a:.3} ratio={:.3}", sb_a / sb_t);
    assert!(mtld_a >= 2.0 * mtld_t);
    assert!(sb_a <= 0.7 * sb_t);
}
