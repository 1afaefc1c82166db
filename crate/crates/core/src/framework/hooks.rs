//! The standard hook table.
//!
//! Behaviorally implemented hooks carry full argument schemas. The rest of the
//! interface surface is registered schema-only so modules can declare it, but
//! no simulated service ever triggers it.

use super::hook::{HookCategory, HookDescriptor, Layer, SemanticType};

use HookCategory::*;

pub const SCAN_PACKAGE: &str = "pms.scanPackage";
pub const GET_INSTALLED_PACKAGES: &str = "pms.getInstalledPackages";
pub const DELIVER_TO_RECEIVER: &str = "broadcast.deliverToRegisteredReceiver";
pub const START_ACTIVITY: &str = "ams.startActivity";
pub const BIND_SERVICE: &str = "ams.bindService";
pub const CHECK_COMPONENT_PERMISSION: &str = "ams.checkComponentPermission";
pub const GET_LAST_LOCATION: &str = "location.getLastLocation";
pub const GET_ALL_PROVIDERS: &str = "location.getAllProviders";
pub const REPORT_LOCATION: &str = "location.reportLocation";
pub const REQUEST_LOCATION_UPDATES: &str = "location.requestLocationUpdates";
pub const PRE_QUERY: &str = "cp.preQuery";
pub const POST_QUERY: &str = "cp.postQuery";
pub const GET_DEVICE_ID: &str = "phonesubinfo.getDeviceId";
pub const GET_PRIMARY_CLIP: &str = "clip.getPrimaryClip";
pub const SET_PRIMARY_CLIP: &str = "clip.setPrimaryClip";
pub const INSTRUMENT_APP: &str = "generic.instrumentApp";
pub const REPORT_INTERACTION: &str = "generic.reportInteraction";
pub const ZYGOTE_UID_POLICY: &str = "zygote.applyUidSecurityPolicy";
pub const ZYGOTE_LABEL_POLICY: &str = "zygote.applySecurityLabelPolicy";

/// Hooks through which inter-app communication is granted.
pub const IPC_HOOKS: [&str; 3] = [DELIVER_TO_RECEIVER, START_ACTIVITY, BIND_SERVICE];

fn ty(s: &str) -> SemanticType {
    s.parse().unwrap_or_else(|e| panic!("bad type in hook table: {e}"))
}

fn hook(id: &str, layer: Layer, category: HookCategory, args: &str, ret: Option<&str>) -> HookDescriptor {
    let mut d = HookDescriptor::new(id, layer, category);
    for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, t) = part.split_once(':').expect("arg spec is name:type");
        d = d.arg(name.trim(), ty(t));
    }
    if let Some(r) = ret {
        d = d.returns(ty(r));
    }
    d
}

const IPC_ARGS: &str = "intent:intent, target_component:text, target_package:text, target_uid:int, \
                        target_pid:int?, caller_package:text?, required_permission:text?";

fn implemented() -> Vec<HookDescriptor> {
    use Layer::*;
    vec![
        hook(SCAN_PACKAGE, Middleware, BooleanTruncation, "package:package, replacing:bool", None),
        hook(GET_INSTALLED_PACKAGES, Middleware, ListFilter, "", Some("list<package>")),
        hook(DELIVER_TO_RECEIVER, Middleware, BooleanTruncation, IPC_ARGS, None),
        hook(START_ACTIVITY, Middleware, BooleanTruncation, IPC_ARGS, None),
        hook(BIND_SERVICE, Middleware, BooleanTruncation, IPC_ARGS, None),
        hook(
            CHECK_COMPONENT_PERMISSION,
            Middleware,
            EditReturn,
            "permission:text, owner_uid:int, exported:bool",
            Some("int"),
        ),
        hook(GET_LAST_LOCATION, Middleware, EditReturn, "provider:text?", Some("location")),
        hook(GET_ALL_PROVIDERS, Middleware, ListFilter, "", Some("list<text>")),
        hook(REPORT_LOCATION, Middleware, EditReturn, "", Some("location")),
        hook(REQUEST_LOCATION_UPDATES, Middleware, ErrorTruncation, "provider:text", None),
        hook(PRE_QUERY, Middleware, BooleanTruncation, "store:text, selection:bundle", None),
        hook(POST_QUERY, Middleware, EditReturn, "store:text, selection:bundle", Some("result_set")),
        hook(GET_DEVICE_ID, Middleware, EditReturn, "", Some("text")),
        hook(GET_PRIMARY_CLIP, Middleware, EditReturn, "", Some("text")),
        hook(SET_PRIMARY_CLIP, Middleware, BooleanTruncation, "text:text", None),
        hook(INSTRUMENT_APP, Middleware, EditReturn, "package:text, uid:int", Some("text")),
        hook(REPORT_INTERACTION, Middleware, ObserveOnly, "caller_uid:int, callee_uid:int, channel:text", None),
        hook(ZYGOTE_UID_POLICY, Kernel, BooleanTruncation, "uid:int, package:text", None),
        hook(ZYGOTE_LABEL_POLICY, Kernel, BooleanTruncation, "uid:int, package:text", None),
    ]
}

/// Interface functions registered for declaration only.
const SCHEMA_ONLY: &[&str] = &[
    "ams.checkAppSwitchAllowed",
    "ams.checkCPUriPermission",
    "ams.checkContentProviderPermission",
    "ams.checkGrantUriPermission",
    "ams.checkPathPermission",
    "ams.checkUriPermission",
    "ams.clearApplicationUserData",
    "ams.finishActivity",
    "ams.getServices",
    "ams.moveTaskToBack",
    "ams.moveTaskToFront",
    "ams.peekService",
    "ams.startService",
    "ams.stopService",
    "audio.adjustStreamVolume",
    "audio.setMasterVolume",
    "audio.setRingerMode",
    "audio.setSpeakerphoneOn",
    "audio.setStreamVolume",
    "broadcast.processNextBroadcast",
    "clip.getPrimaryClipDescription",
    "clip.hasClipboardText",
    "clip.hasPrimaryClip",
    "clip.informPrimaryClipChanged",
    "contacts.postQueryDirectory",
    "contacts.preQueryDirectory",
    "cp.applyOperation",
    "cp.bulkInsert",
    "cp.delete",
    "cp.insert",
    "cp.openFile",
    "cp.postCall",
    "cp.preCall",
    "cp.update",
    "generic.checkPolicy",
    "location.addGpsStatusListener",
    "location.addTestProvider",
    "location.clearTestProviderEnabled",
    "location.clearTestProviderLocation",
    "location.clearTestProviderStatus",
    "location.getProviders",
    "location.isProviderEnabled",
    "location.removeGeofence",
    "location.removeLocationUpdates",
    "location.removeTestProvider",
    "location.requestGeofence",
    "location.sendExtraCommand",
    "location.sendLocationUpdate",
    "location.setTestProviderEnabled",
    "location.setTestProviderLocation",
    "location.setTestProviderStatus",
    "location.updateFence",
    "phonesubinfo.getDeviceSvn",
    "phonesubinfo.getGroupIdLevel",
    "phonesubinfo.getIccSerialNumber",
    "phonesubinfo.getIsimDomain",
    "phonesubinfo.getIsimImpi",
    "phonesubinfo.getIsimImpu",
    "phonesubinfo.getLine",
    "phonesubinfo.getMsisdn",
    "phonesubinfo.getSubscriberId",
    "phonesubinfo.getVoiceMailAphaTag",
    "phonesubinfo.getVoiceMailNumber",
    "pms.deletePackage",
    "pms.deletePackageSingleUser",
    "pms.findPreferredActivity",
    "pms.getActivityInfo",
    "pms.getInstalledApplications",
    "pms.getNameForUid",
    "pms.getPackageGids",
    "pms.getPackageInfo",
    "pms.getPackageUid",
    "pms.getPackagesForUid",
    "pms.getPackagesHoldingPermissions",
    "pms.getPersistentApplications",
    "pms.getProviderInfo",
    "pms.getReceiverInfo",
    "pms.getServiceInfo",
    "pms.getUidForSharedUser",
    "pms.queryIntentActivities",
    "pms.queryIntentReceivers",
    "pms.queryIntentServices",
    "power.acquireWakeLock",
    "power.goToSleep",
    "power.nap",
    "power.reboot",
    "power.setBacklightBrightness",
    "power.userActivity",
    "power.wakeUp",
    "sms.copyMessageToIcc",
    "sms.getAllMessagesFromIcc",
    "sms.getAllMessagesFromIccFilter",
    "sms.sendData",
    "sms.sendMultipartText",
    "sms.sendText",
    "sms.updateMessageOnIccEf",
    "telephony.call",
    "telephony.getNeighboringCellInfo",
    "wifi.addOrUpdateNetwork",
    "wifi.addToBlacklist",
    "wifi.clearBlacklist",
    "wifi.disableNetwork",
    "wifi.disconnect",
    "wifi.enableNetwork",
    "wifi.getConfigFile",
    "wifi.getConfiguredNetworks",
    "wifi.getConnectionInfo",
    "wifi.getScanResult",
    "wifi.getWifiServiceMessenger",
    "wifi.getWifiStateMachineMessenger",
    "wifi.reassociate",
    "wifi.reconnect",
    "wifi.removeNetwork",
    "wifi.setCountryCode",
    "wifi.setFrequencyBand",
    "wifi.setWifiApConfiguration",
    "wifi.setWifiApEnabled",
    "wifi.setWifiEnabled",
    "wifi.startScan",
    "wifi.startWifi",
    "wifi.stopWifi",
    "zygote.applyCapabilitiesSecurityPolicy",
    "zygote.applyInvokeWithSecurityPolicy",
    "zygote.applyRlimitSecurityPolicy",
];

/// Getter-style functions can hand back an edited value; everything else only
/// truncates.
fn schema_only(id: &str) -> HookDescriptor {
    let layer = if id.starts_with("zygote.") { Layer::Kernel } else { Layer::Middleware };
    let name = id.split_once('.').map_or(id, |(_, n)| n);
    let edits = ["get", "post", "query", "find", "peek"].iter().any(|p| name.starts_with(p));
    let d = if edits {
        HookDescriptor::new(id, layer, EditReturn).returns(SemanticType::Any)
    } else {
        HookDescriptor::new(id, layer, BooleanTruncation)
    };
    d.schema_only()
}

/// Every standard hook, implemented ones first.
pub fn standard_hooks() -> Vec<HookDescriptor> {
    let mut all = implemented();
    all.extend(SCHEMA_ONLY.iter().map(|id| schema_only(id)));
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ids_are_unique_and_valid() {
        let hooks = standard_hooks();
        let ids: BTreeSet<_> = hooks.iter().map(|h| h.id.clone()).collect();
        assert_eq!(ids.len(), hooks.len());
        for h in &hooks {
            h.validate().unwrap();
        }
    }

    #[test]
    fn implemented_set_covers_every_category() {
        let cats: BTreeSet<_> = standard_hooks().into_iter().filter(|h| h.implemented).map(|h| h.category).collect();
        assert_eq!(cats.len(), HookCategory::ALL.len());
    }
}
