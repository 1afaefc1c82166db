//! Stock API methods every process table starts with, and the AppGuard-style
//! monitor.

use crate::bundle::{Bundle, Value};

use super::{target, IrmError, IrmRuntime, MethodRef, Monitor};

pub const OPEN_CONNECTION: &str = "java.net.URL->openConnection(text)";
pub const SEND_TEXT_MESSAGE: &str = "android.telephony.SmsManager->sendTextMessage(text,text)";
pub const READ_FILE: &str = "java.io.FileInputStream->read(text)";
pub const APPGUARD_MONITOR: &str = "appguard.Monitor";

const APPGUARD_OPEN: &str = "appguard.Monitor->openConnection(text)";

/// Registers the stock API surface. Each method echoes a deterministic
/// description of what it did, so traces stay comparable.
pub fn install_standard_library(rt: &IrmRuntime) {
    rt.define(
        OPEN_CONNECTION,
        target(|_, args| Ok(Value::from(format!("connected:{}", args[0].as_str().unwrap_or_default())))),
    )
    .expect("valid descriptor");
    rt.define(
        SEND_TEXT_MESSAGE,
        target(|_, args| {
            Ok(Value::from(format!(
                "sent:{}:{}",
                args[0].as_str().unwrap_or_default(),
                args[1].as_str().unwrap_or_default()
            )))
        }),
    )
    .expect("valid descriptor");
    rt.define(READ_FILE, target(|_, args| Ok(Value::from(format!("read:{}", args[0].as_str().unwrap_or_default())))))
        .expect("valid descriptor");
    rt.define(
        APPGUARD_OPEN,
        target(|ctx, args| {
            let url = args[0].as_str().unwrap_or_default();
            let upgraded = match url.strip_prefix("http://") {
                Some(rest) => format!("https://{rest}"),
                None => url.to_owned(),
            };
            ctx.call_original(&[Value::from(upgraded)])
        }),
    )
    .expect("valid descriptor");
}

/// Inlined monitor with two policies, both driven by the policy bundle:
///
/// * `https_upgrade` (bool, default true) rewrites `http://` URLs before
///   `openConnection` runs.
/// * `deny_methods` (list of descriptors) makes the listed methods fail.
#[derive(Debug, Default)]
pub struct AppGuardMonitor;

impl Monitor for AppGuardMonitor {
    fn id(&self) -> &str {
        APPGUARD_MONITOR
    }

    fn setup(&self, rt: &IrmRuntime, pid: u32, policy: &Bundle) -> Result<(), IrmError> {
        if policy.get_bool("https_upgrade").unwrap_or(true) {
            rt.redirect(pid, OPEN_CONNECTION, APPGUARD_OPEN)?;
        }
        for descriptor in policy.get_text_list("deny_methods").unwrap_or_default() {
            let method = MethodRef::parse(&descriptor)?;
            let denier = method.with_owner(APPGUARD_MONITOR, &format!("deny_{}", method.name));
            let shown = method.to_string();
            rt.define_in_process(pid, &denier.to_string(), target(move |_, _| Err(IrmError::Denied(shown.clone()))))?;
            rt.redirect_method(pid, &method, &denier)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::List;

    #[test]
    fn https_upgrade_and_method_deny() {
        let rt = IrmRuntime::standard();
        rt.create_process(100);
        let policy = Bundle::new().with("deny_methods", List::of_text([SEND_TEXT_MESSAGE]));
        rt.bootstrap_monitor(100, APPGUARD_MONITOR, &policy).unwrap();
        let out = rt.invoke_str(100, OPEN_CONNECTION, &[Value::from("http://example.org")]).unwrap();
        assert_eq!(out, Value::from("connected:https://example.org"));
        let sms = rt.invoke_str(100, SEND_TEXT_MESSAGE, &[Value::from("123"), Value::from("hi")]);
        assert!(matches!(sms, Err(IrmError::Denied(_))));
    }

    #[test]
    fn bad_policy_fails_bootstrap() {
        let rt = IrmRuntime::standard();
        rt.create_process(100);
        let policy = Bundle::new().with("deny_methods", List::of_text(["not a method"]));
        assert!(matches!(rt.bootstrap_monitor(100, APPGUARD_MONITOR, &policy), Err(IrmError::BootstrapFailed(_))));
    }
}
