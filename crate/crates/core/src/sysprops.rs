//! Reserved message property names maintained by the system.

use crate::expr::ValueType;
use crate::lang::QueueKind;

pub const SENDER: &str = "Sender";
pub const RECIPIENT: &str = "Recipient";
pub const CONNECTION_ID: &str = "ConnectionId";
pub const ARRIVAL_TIME: &str = "ArrivalTime";
pub const CREATION_TIME: &str = "CreationTime";
pub const CREATING_RULE: &str = "CreatingRule";
pub const ECHO_TARGET: &str = "EchoTarget";
pub const ECHO_DELAY: &str = "EchoDelay";

pub const ALL: &[&str] = &[
    SENDER,
    RECIPIENT,
    CONNECTION_ID,
    ARRIVAL_TIME,
    CREATION_TIME,
    CREATING_RULE,
    ECHO_TARGET,
    ECHO_DELAY,
];

pub fn is_reserved(name: &str) -> bool {
    ALL.contains(&name)
}

pub fn value_type(name: &str) -> Option<ValueType> {
    Some(match name {
        SENDER | RECIPIENT | CONNECTION_ID | CREATING_RULE | ECHO_TARGET => ValueType::String,
        ARRIVAL_TIME | CREATION_TIME => ValueType::DateTime,
        ECHO_DELAY => ValueType::Integer,
        _ => return None,
    })
}

/// Whether a `with` clause may assign `name` on a message entering a queue
/// of `kind`.
pub fn settable(name: &str, kind: QueueKind) -> bool {
    match name {
        SENDER | RECIPIENT => kind == QueueKind::OutgoingGateway,
        ECHO_TARGET | ECHO_DELAY => kind == QueueKind::Echo,
        _ => false,
    }
}

/// Reserved properties copied from the triggering message.
pub fn inherited(name: &str) -> bool {
    name == CONNECTION_ID
}
