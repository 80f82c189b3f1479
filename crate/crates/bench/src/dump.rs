//! Forecast dumps for external plotting: one CSV per sample holding the
//! input window, the true future, and the model's forecast, per channel.

use std::fs;
use std::path::Path;

use threetank_models::Model;
use threetank_sim::{Sample, CHANNELS, INPUT_STEPS, TARGET_STEPS, WINDOW_STEPS};
use threetank_train::{eval_batch_size, forecast_original};

use crate::{BenchError, Result};

const CHANNEL_NAMES: [&str; CHANNELS] = ["h1", "h2", "h3"];

/// The plotted quantities for one sample, all row-major `(step, channel)`
/// and in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastDump {
    pub config_hash: String,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub forecast: Vec<f64>,
}

impl ForecastDump {
    fn validate(&self) -> Result<()> {
        if self.input.len() != INPUT_STEPS * CHANNELS
            || self.target.len() != TARGET_STEPS * CHANNELS
            || self.forecast.len() != TARGET_STEPS * CHANNELS
        {
            return Err(BenchError::Invalid(format!(
                "forecast dump shapes {}/{}/{} (expected {}/{}/{})",
                self.input.len(),
                self.target.len(),
                self.forecast.len(),
                INPUT_STEPS * CHANNELS,
                TARGET_STEPS * CHANNELS,
                TARGET_STEPS * CHANNELS,
            )));
        }
        Ok(())
    }

    /// Serialize as CSV: a config-hash comment, a header, then one section
    /// of 300 rows per channel (250 input steps, 50 forecast steps).
    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash={}\n", self.config_hash);
        out.push_str("channel,step,input,target,forecast\n");
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            for t in 0..WINDOW_STEPS {
                if t < INPUT_STEPS {
                    let v = self.input[t * CHANNELS + c];
                    out.push_str(&format!("{name},{t},{v:e},,\n"));
                } else {
                    let j = (t - INPUT_STEPS) * CHANNELS + c;
                    out.push_str(&format!(
                        "{name},{t},,{:e},{:e}\n",
                        self.target[j], self.forecast[j]
                    ));
                }
            }
        }
        out
    }
}

/// Write the forecast for `sample` to `path`. The forecast column comes from
/// the same deployment-mode forecast implementation evaluation reads, so the
/// plotted curve and the scored number agree bit for bit.
pub fn dump_forecast(
    model: &Model,
    sample: &Sample,
    path: impl AsRef<Path>,
    config_hash: &str,
) -> Result<ForecastDump> {
    let forecast =
        forecast_original(model, std::slice::from_ref(sample), eval_batch_size(model.kind()))?;
    let dump = ForecastDump {
        config_hash: config_hash.to_string(),
        input: sample.input.clone(),
        target: sample.target.clone(),
        forecast,
    };
    dump.validate()?;
    if let Some(dir) = path.as_ref().parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path.as_ref(), dump.to_csv())?;
    Ok(dump)
}

/// Parse a file written by [`dump_forecast`] back into its quantities.
pub fn read_forecast_dump(path: impl AsRef<Path>) -> Result<ForecastDump> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: String| BenchError::Invalid(format!("{}: {msg}", path.display()));

    let config_hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .ok_or_else(|| bad("missing config-hash comment".into()))?
        .to_string();
    let header = lines.next().unwrap_or_default();
    if header != "channel,step,input,target,forecast" {
        return Err(bad(format!("unexpected header '{header}'")));
    }

    let mut dump = ForecastDump {
        config_hash,
        input: vec![0.0; INPUT_STEPS * CHANNELS],
        target: vec![0.0; TARGET_STEPS * CHANNELS],
        forecast: vec![0.0; TARGET_STEPS * CHANNELS],
    };
    let mut rows = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(format!("row {}: expected 5 fields", lineno + 3)));
        }
        let c = CHANNEL_NAMES
            .iter()
            .position(|n| *n == fields[0])
            .ok_or_else(|| bad(format!("row {}: unknown channel '{}'", lineno + 3, fields[0])))?;
        let t: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("row {}: bad step '{}'", lineno + 3, fields[1])))?;
        if t >= WINDOW_STEPS {
            return Err(bad(format!("row {}: step {t} out of range", lineno + 3)));
        }
        let value = |f: &str| -> Result<f64> {
            f.parse().map_err(|_| bad(format!("row {}: bad value '{f}'", lineno + 3)))
        };
        if t < INPUT_STEPS {
            if fields[3].is_empty() && fields[4].is_empty() {
                dump.input[t * CHANNELS + c] = value(fields[2])?;
            } else {
                return Err(bad(format!("row {}: input step carries future columns", lineno + 3)));
            }
        } else if fields[2].is_empty() {
            let j = (t - INPUT_STEPS) * CHANNELS + c;
            dump.target[j] = value(fields[3])?;
            dump.forecast[j] = value(fields[4])?;
        } else {
            return Err(bad(format!("row {}: forecast step carries an input column", lineno + 3)));
        }
        rows += 1;
    }
    if rows != WINDOW_STEPS * CHANNELS {
        return Err(bad(format!("expected {} data rows, found {rows}", WINDOW_STEPS * CHANNELS)));
    }
    Ok(dump)
}
