/// A pair loss and its partial derivatives with respect to the two scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// `max(0, margin - (s⁺ - s⁻))`. The subgradient at the kink is zero.
pub fn hinge_pair_loss(score_pos: f64, score_neg: f64, margin: f64) -> PairLoss {
    let violation = margin - (score_pos - score_neg);
    if violation > 0.0 {
        PairLoss {
            loss: violation,
            d_pos: -1.0,
            d_neg: 1.0,
        }
    } else {
        PairLoss {
            loss: 0.0,
            d_pos: 0.0,
            d_neg: 0.0,
        }
    }
}

/// `ln(1 + exp(-(s⁺ - s⁻)))`, evaluated without overflow.
pub fn logistic_pair_loss(score_pos: f64, score_neg: f64) -> PairLoss {
    let delta = score_pos - score_neg;
    let loss = if delta < 0.0 {
        -delta + (delta).exp().ln_1p()
    } else {
        (-delta).exp().ln_1p()
    };
    // σ(-Δ)
    let weight = if delta >= 0.0 {
        let e = (-delta).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + delta.exp())
    };
    PairLoss {
        loss,
        d_pos: -weight,
        d_neg: weight,
    }
}
