//! Estimates the four commutator constants of Doob's maximal operator over
//! a small corpus, then checks the pointwise sandwich for one commutator.

use martingale_products::commutator::{kq_certify, sandwich_check, DoobMaximal, KqConstant, KqCorpus, OpKind};
use martingale_products::filtration::uniform_dyadic;
use martingale_products::harness::{generate_bmo, random_martingale, BmoProfile};
use martingale_products::Result;

fn main() -> Result<()> {
    let corpus = KqCorpus {
        depths: vec![6, 8],
        samples: 40,
        ..KqCorpus::default()
    };
    let cert = kq_certify(OpKind::Maximal, 1.0, &corpus)?;
    for c in KqConstant::ALL {
        println!("{:<18} {:?}  spread {:.3}", c.name(), cert.values(c), cert.spread(c));
    }
    if let Some(e) = cert.max_shortcut_error() {
        println!("commuting identity defect {e:.2e}");
    }

    let tree = uniform_dyadic(8)?;
    let b = generate_bmo(&tree, BmoProfile::LogSpike, 5);
    let f = random_martingale(&tree, 6).terminal();
    let r = sandwich_check(&DoobMaximal::new(tree), &f, &b)?;
    println!("sandwich violations: upper {:.2e}, lower {:.2e}", r.upper_violation, r.lower_violation);
    Ok(())
}
