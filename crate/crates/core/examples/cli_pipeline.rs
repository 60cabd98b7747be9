//! Runs the command-line pipeline in-process on a scratch directory with a
//! small configuration: gen, train-nf, train-lift, eval, then lift one record.

use poselift::cli;

const CONFIG: &str = r#"
[data.synthetic]
count = 1200
[flow.train]
epochs = 8
[lift]
dim = 64
[lift.train]
epochs = 4
batch = 64
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG)?;
    let (config, out) = (config.to_str().unwrap(), dir.path().join("out"));
    let out = out.to_str().unwrap();

    let shared = ["--config", config, "--out", out];
    for stage in [&["gen"][..], &["train-nf"], &["train-lift", "--seed", "4"], &["eval"]] {
        let args = ["poselift"].iter().chain(stage).chain(&shared).copied();
        println!("$ poselift {}", stage.join(" "));
        let code = cli::run(args);
        if code != cli::EXIT_OK {
            return Err(format!("stage {} exited with {code}", stage[0]).into());
        }
    }
    let mut files: Vec<_> = std::fs::read_dir(out)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()?;
    files.sort();
    println!("output directory: {}", files.join(", "));

    let mut pose = Vec::new();
    cli::run_with(["poselift", "lift", "--out", out, "--id", "0"], &mut pose, &mut std::io::stderr());
    println!("lifted record 0 ({} bytes of JSON)", pose.len());
    Ok(())
}
