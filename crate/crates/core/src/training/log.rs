use std::io::Write;

use serde_json::{Map, Value};

use crate::training::loss::TotalLoss;

/// One optimizer update of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: TotalLoss,
    pub lr_pretrained: f64,
    pub lr_new: f64,
    pub grad_norm: f64,
}

impl LogRecord {
    /// Flat JSON object: `step`, `kl_t` / `ce_t` for every supervised
    /// iteration that has the term, `total`, `lr_pretrained`, `lr_new`,
    /// `grad_norm`.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("step".into(), self.step.into());
        for (i, s) in self.loss.per_step.iter().enumerate() {
            if let Some(kl) = s.kl {
                m.insert(format!("kl_{}", i + 1), kl.into());
            }
        }
        for (i, s) in self.loss.per_step.iter().enumerate() {
            if let Some(ce) = s.ce {
                m.insert(format!("ce_{}", i + 1), ce.into());
            }
        }
        m.insert("total".into(), self.loss.total.into());
        m.insert("lr_pretrained".into(), self.lr_pretrained.into());
        m.insert("lr_new".into(), self.lr_new.into());
        m.insert("grad_norm".into(), self.grad_norm.into());
        Value::Object(m)
    }
}

/// Writes records as line-delimited JSON.
pub fn write_jsonl(records: &[LogRecord], out: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, &r.to_json())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::loss::StepLoss;

    #[test]
    fn keys_follow_terms() {
        let r = LogRecord {
            step: 3,
            loss: TotalLoss {
                per_step: vec![StepLoss {
                    kl: None,
                    ce: Some(1.5),
                    total: 1.5,
                }],
                total: 1.5,
            },
            lr_pretrained: 0.1,
            lr_new: 0.2,
            grad_norm: 0.0,
        };
        let mut buf = Vec::new();
        write_jsonl(&[r], &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        let v: Value = serde_json::from_str(line.trim()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert!(keys.iter().all(|k| !k.starts_with("kl_")));
        assert_eq!(v["ce_1"], 1.5);
    }
}
