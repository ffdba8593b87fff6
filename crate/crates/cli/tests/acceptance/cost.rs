use std::process::Command;
use std::time::Instant;

use crate::common::rel;
use crate::Outcome;

struct Table {
    res: Vec<(usize, f64)>,
    stages: Vec<(usize, usize, f64)>,
    weighted: Option<f64>,
    seconds: f64,
}

fn flops(args: &[&str]) -> Result<Table, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_s3l"))
        .arg("flops")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    let mut t = Table {
        res: vec![],
        stages: vec![],
        weighted: None,
        seconds,
    };
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{line}: {e}"));
        match f[0] {
            "res" => t.res.push((num(1)? as usize, num(3)?)),
            "stage" => t.stages.push((num(1)? as usize, num(2)? as usize, num(3)?)),
            "weighted_mean" => t.weighted = Some(num(3)?),
            other => return Err(format!("unexpected row `{other}`")),
        }
    }
    Ok(t)
}

pub fn run() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    let mut errors = Vec::new();
    let mut note = |what: String, got: f64, want: f64| {
        let e = rel(got, want);
        worst = worst.max(e);
        if e >= 0.01 {
            errors.push(format!("{what}: {:.2}M vs {want:.2}M", got / 1e6));
        }
    };

    let singles = [
        ("resnet18", [1824.54e6, 488.40e6, 130.75e6]),
        ("resnet50", [4135.79e6, 1091.26e6, 304.06e6]),
    ];
    for (net, want) in singles {
        let t = flops(&["--backbone", net, "--res", "224,112,56"])?;
        slowest = slowest.max(t.seconds);
        for ((r, got), w) in t.res.iter().zip(want) {
            note(format!("{net}@{r}"), *got, w);
        }
    }

    let two_stage = [
        ("resnet18", "112:800,224:200", 755.63e6),
        ("resnet18", "56:800,112:200", 202.28e6),
        ("resnet50", "112:800,224:200", 1700.17e6),
        ("resnet50", "56:800,112:200", 461.50e6),
    ];
    for (net, plan, want) in two_stage {
        let t = flops(&["--backbone", net, "--plan", plan])?;
        slowest = slowest.max(t.seconds);
        note(format!("{net} {plan}"), t.weighted.ok_or("no weighted row")?, want);
    }

    // Three-stage rows: weighted by total epochs, reference values divide by 1300.
    let mut three = Vec::new();
    for (net, reference) in [("resnet18", 295.95e6), ("resnet50", 673.14e6)] {
        let t = flops(&["--backbone", net, "--plan", "56:800,112:200,224:100"])?;
        slowest = slowest.max(t.seconds);
        let sum: f64 = t.stages.iter().map(|&(_, e, m)| e as f64 * m).sum();
        let epochs: usize = t.stages.iter().map(|s| s.1).sum();
        let got = t.weighted.ok_or("no weighted row")?;
        if rel(got, sum / epochs as f64) > 1e-9 {
            errors.push(format!("{net} three-stage mean {got} is not sum/{epochs}"));
        }
        three.push(format!(
            "{net}: {:.2}M by /{epochs}, {:.2}M by /1300 vs reference {:.2}M",
            got / 1e6,
            sum / 1300.0 / 1e6,
            reference / 1e6
        ));
    }

    if slowest >= 1.0 {
        errors.push(format!("slowest invocation {slowest:.2}s"));
    }
    let detail = format!(
        "worst deviation {:.2}%, slowest call {:.3}s; three-stage discrepancy: {}",
        worst * 100.0,
        slowest,
        three.join("; ")
    );
    if errors.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", errors.join("; ")))
    }
}
