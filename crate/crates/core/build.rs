use std::process::Command;

fn main() {
    // Version stamp for run manifests; falls back to the crate version when
    // the build does not happen inside a git checkout.
    if let Ok(out) =
        Command::new("git").args(["describe", "--always", "--dirty", "--tags"]).output()
    {
        if out.status.success() {
            let v = String::from_utf8_lossy(&out.stdout).trim().to_string();
            if !v.is_empty() {
                println!("cargo:rustc-env=SGK_GIT_DESCRIBE={v}");
            }
        }
    }
}
