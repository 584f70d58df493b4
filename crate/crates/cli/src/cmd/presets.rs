//! `pfode presets`: list the bundled mixtures, optionally writing each one
//! as a mixture JSON file ready to reference from a config.

use std::path::Path;

use pfode_core::{preset, preset_names};

use crate::{write_output, Result};

pub fn run(out: Option<&Path>) -> Result<()> {
    for name in preset_names() {
        let gm = preset(name).map_err(|e| crate::CliError::Usage(e.to_string()))?;
        println!("{name}  dim {}  components {}", gm.dim(), gm.components().len());
        if let Some(dir) = out {
            let mut text = serde_json::to_string_pretty(&gm)
                .map_err(|e| crate::CliError::Numerical(format!("mixture serialization: {e}")))?;
            text.push('\n');
            let path = write_output(dir, &format!("{name}.json"), &text)?;
            println!("  wrote {}", path.display());
        }
    }
    Ok(())
}
