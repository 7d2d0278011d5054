//! Hyperparameter grids, enumerated in declaration order.

use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adaptation::{AdaptationSpec, TrainHyper};
use crate::error::{Error, Result};

pub const GRID_KEYS: [&str; 5] = [
    "learning_rate",
    "weight_decay",
    "epochs",
    "lora_rank",
    "lambda_recon",
];

/// Ordered `name -> values` axes. Serialized as a JSON object whose key order
/// is the enumeration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GridSpec {
    pub axes: Vec<(String, Vec<f64>)>,
}

/// One grid configuration, keys in declaration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GridPoint(pub Vec<(String, f64)>);

impl GridSpec {
    pub fn new(axes: Vec<(&str, Vec<f64>)>) -> Self {
        GridSpec {
            axes: axes.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// lr ∈ {3e-4, 1e-3, 3e-3}, weight decay ∈ {0, 1e-4}, epochs ∈ {10, 30},
    /// plus rank ∈ {2, 4, 8} when tuning LoRA.
    pub fn default_for(lora: bool) -> Self {
        let mut axes = vec![
            ("learning_rate", vec![3e-4, 1e-3, 3e-3]),
            ("weight_decay", vec![0.0, 1e-4]),
            ("epochs", vec![10.0, 30.0]),
        ];
        if lora {
            axes.push(("lora_rank", vec![2.0, 4.0, 8.0]));
        }
        GridSpec::new(axes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::Config("grid must have non-empty axes".into()));
        }
        for (name, values) in &self.axes {
            if !GRID_KEYS.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown grid key {name:?}; expected one of {}",
                    GRID_KEYS.join(", ")
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "grid axis {name} has a non-finite value"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product; the last declared axis varies fastest.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        self.validate()?;
        let mut out = vec![GridPoint::default()];
        for (name, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.0.push((name.clone(), v));
                        q
                    })
                })
                .collect();
        }
        Ok(out)
    }
}

impl GridPoint {
    /// Writes the point's values over the training and adapter settings.
    pub fn apply(&self, spec: &mut AdaptationSpec, hyper: &mut TrainHyper) -> Result<()> {
        let whole = |name: &str, v: f64| -> Result<usize> {
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a positive integer, got {v}"
                )));
            }
            Ok(v as usize)
        };
        for (name, v) in &self.0 {
            match name.as_str() {
                "learning_rate" => hyper.learning_rate = *v as f32,
                "weight_decay" => hyper.weight_decay = *v as f32,
                "epochs" => hyper.epochs = whole(name, *v)?,
                "lambda_recon" => hyper.lambda_recon = Some(*v as f32),
                "lora_rank" => {
                    // Alpha follows the rank (2r) unless pinned in the spec.
                    spec.lora_rank = whole(name, *v)?;
                }
                other => return Err(Error::Config(format!("unknown grid key {other:?}"))),
            }
        }
        Ok(())
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(","))
    }
}

fn serialize_pairs<S: Serializer, V: Serialize>(
    pairs: &[(String, V)],
    serializer: S,
) -> std::result::Result<S::Ok, S::Error> {
    let mut map = serializer.serialize_map(Some(pairs.len()))?;
    for (k, v) in pairs {
        map.serialize_entry(k, v)?;
    }
    map.end()
}

struct OrderedPairs<V>(std::marker::PhantomData<V>);

impl<'de, V: Deserialize<'de>> Visitor<'de> for OrderedPairs<V> {
    type Value = Vec<(String, V)>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON object")
    }

    fn visit_map<A: MapAccess<'de>>(
        self,
        mut map: A,
    ) -> std::result::Result<Self::Value, A::Error> {
        let mut out = Vec::new();
        while let Some((k, v)) = map.next_entry::<String, V>()? {
            out.push((k, v));
        }
        Ok(out)
    }
}

impl Serialize for GridSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_pairs(&self.axes, s)
    }
}

impl<'de> Deserialize<'de> for GridSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(GridSpec {
            axes: d.deserialize_map(OrderedPairs(std::marker::PhantomData))?,
        })
    }
}

impl Serialize for GridPoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_pairs(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for GridPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(GridPoint(
            d.deserialize_map(OrderedPairs(std::marker::PhantomData))?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn declaration_order_survives_json() {
        let json = r#"{"weight_decay":[0.0,0.1],"learning_rate":[0.01]}"#;
        let g: GridSpec = serde_json::from_str(json).unwrap();
        assert_eq!(g.axes[0].0, "weight_decay");
        assert_eq!(serde_json::to_string(&g).unwrap(), json);
    }

    #[test]
    fn last_axis_varies_fastest() {
        let g = GridSpec::new(vec![
            ("learning_rate", vec![1.0, 2.0]),
            ("epochs", vec![3.0, 4.0]),
        ]);
        let p: Vec<String> = g.points().unwrap().iter().map(|p| p.to_string()).collect();
        assert_eq!(
            p,
            [
                "learning_rate=1,epochs=3",
                "learning_rate=1,epochs=4",
                "learning_rate=2,epochs=3",
                "learning_rate=2,epochs=4"
            ]
        );
        assert_eq!(GridSpec::default_for(true).len(), 36);
    }

    #[test]
    fn bad_grids() {
        assert!(GridSpec::default().points().is_err());
        assert!(GridSpec::new(vec![("momentum", vec![0.9])])
            .points()
            .is_err());
        let p = GridSpec::new(vec![("epochs", vec![2.5])]).points().unwrap();
        let r = p[0].apply(&mut AdaptationSpec::default(), &mut TrainHyper::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
