use serde::{Deserialize, Serialize};

use crate::domain::{CardId, Timestamp};
use crate::model::{ModelError, StudentModel, StudentView};

/// Last day offset of a curve; offsets run 0..=CURVE_DAYS.
pub const CURVE_DAYS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub day: u32,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCurve {
    pub card_id: CardId,
    pub points: Vec<CurvePoint>,
}

/// Predicted recall of `card` at `start + d` days for d in 0..=20, with no new studies.
pub fn forgetting_curve(model: &dyn StudentModel, view: &StudentView<'_>, card: &str, start: Timestamp) -> Result<ForgettingCurve, ModelError> {
    let points = (0..=CURVE_DAYS)
        .map(|day| {
            let p = model.predict(view, card, start.plus_days(day as i64))?;
            Ok(CurvePoint {
                day,
                probability: p.probability,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(ForgettingCurve {
        card_id: CardId::new(card),
        points,
    })
}
