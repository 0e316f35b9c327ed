"""A scripted SMF that drives the controller over PFCP.

It builds requests for association, session establishment, modification
and deletion, and records what it learns from every response.  In
particular it keeps the set of peer Node IDs, which is how the tests check
that the whole SR domain looks like one UPF.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from ipaddress import IPv6Address

from . import pfcp
from .pfcp import (
    ApplyAction,
    Cause,
    FSeid,
    FTeid,
    IeType,
    Interface,
    MsgType,
    NodeId,
    OuterHeaderCreation,
    PfcpMessage,
    UeIpAddress,
    group,
)

UPLINK_PDR, DOWNLINK_PDR = 1, 2
UPLINK_FAR, DOWNLINK_FAR = 1, 2


@dataclass
class SmfSession:
    name: str
    ue: str
    network_instance: str
    ue_address: IPv6Address
    ul_teid: int
    qfi: int
    n3_address: IPv6Address
    dl_teid: int | None = None
    gnb_address: IPv6Address | None = None
    cp_seid: int = 0
    up_seid: int | None = None
    state: str = "idle"  # idle, pending, active, released, failed


@dataclass
class SmfEmulator:
    node_id: NodeId
    address: IPv6Address
    sessions: dict[str, SmfSession] = field(default_factory=dict)
    peers: set[str] = field(default_factory=set)
    associated: set[str] = field(default_factory=set)
    responses: list[PfcpMessage] = field(default_factory=list)
    _seq: int = 0
    _next_cp_seid: int = 0x1000
    _pending: dict[int, tuple[str, str | None]] = field(default_factory=dict)

    def _next(self) -> int:
        self._seq += 1
        return self._seq

    def _request(self, mtype: MsgType, ies, seid: int | None = None, session: str | None = None) -> bytes:
        seq = self._next()
        self._pending[seq] = (mtype.name, session)
        return pfcp.encode_pfcp(PfcpMessage(mtype, seq, list(ies), seid=seid))

    def heartbeat(self, recovery_ts: int = 1) -> bytes:
        return self._request(MsgType.HEARTBEAT_REQUEST, [pfcp.recovery_ie(recovery_ts)])

    def association_setup(self, recovery_ts: int = 1) -> bytes:
        return self._request(
            MsgType.ASSOCIATION_SETUP_REQUEST, [self.node_id.to_ie(), pfcp.recovery_ie(recovery_ts)]
        )

    def establishment(self, s: SmfSession) -> bytes:
        s.cp_seid = self._next_cp_seid
        self._next_cp_seid += 1
        s.state = "pending"
        ni = pfcp.network_instance_ie(s.network_instance)
        ies = [
            self.node_id.to_ie(),
            FSeid(s.cp_seid, ipv6=self.address).to_ie(),
            group(
                IeType.CREATE_PDR,
                pfcp.pdr_id_ie(UPLINK_PDR),
                pfcp.precedence_ie(255),
                group(
                    IeType.PDI,
                    pfcp.source_interface_ie(Interface.ACCESS),
                    FTeid(s.ul_teid, ipv6=s.n3_address).to_ie(),
                    ni,
                    pfcp.qfi_ie(s.qfi),
                ),
                pfcp.outer_header_removal_ie(),
                pfcp.far_id_ie(UPLINK_FAR),
            ),
            group(
                IeType.CREATE_PDR,
                pfcp.pdr_id_ie(DOWNLINK_PDR),
                pfcp.precedence_ie(255),
                group(
                    IeType.PDI,
                    pfcp.source_interface_ie(Interface.CORE),
                    UeIpAddress(ipv6=s.ue_address, destination=True).to_ie(),
                    ni,
                ),
                pfcp.far_id_ie(DOWNLINK_FAR),
            ),
            group(
                IeType.CREATE_FAR,
                pfcp.far_id_ie(UPLINK_FAR),
                pfcp.apply_action_ie(ApplyAction.FORW),
                group(IeType.FORWARDING_PARAMETERS, pfcp.destination_interface_ie(Interface.CORE), ni),
            ),
            group(
                IeType.CREATE_FAR,
                pfcp.far_id_ie(DOWNLINK_FAR),
                pfcp.apply_action_ie(ApplyAction.FORW),
                self._downlink_fp(IeType.FORWARDING_PARAMETERS, s),
            ),
        ]
        return self._request(MsgType.SESSION_ESTABLISHMENT_REQUEST, ies, seid=0, session=s.name)

    def _downlink_fp(self, ie_type: IeType, s: SmfSession):
        ohc = None
        if s.dl_teid is not None and s.gnb_address is not None:
            ohc = OuterHeaderCreation(s.dl_teid, ipv6=s.gnb_address).to_ie()
        return group(ie_type, pfcp.destination_interface_ie(Interface.ACCESS), ohc)

    def modification(
        self,
        s: SmfSession,
        *,
        new_gnb: IPv6Address | None = None,
        new_dl_teid: int | None = None,
        uplink_action: int | None = None,
        downlink_action: int | None = None,
        network_instance: str | None = None,
    ) -> bytes:
        ies = []
        if new_gnb is not None or new_dl_teid is not None:
            s.gnb_address = new_gnb or s.gnb_address
            s.dl_teid = new_dl_teid if new_dl_teid is not None else s.dl_teid
        if new_gnb is not None or new_dl_teid is not None or downlink_action is not None:
            ies.append(
                group(
                    IeType.UPDATE_FAR,
                    pfcp.far_id_ie(DOWNLINK_FAR),
                    pfcp.apply_action_ie(downlink_action) if downlink_action is not None else None,
                    self._downlink_fp(IeType.UPDATE_FORWARDING_PARAMETERS, s),
                )
            )
        if uplink_action is not None:
            ies.append(group(IeType.UPDATE_FAR, pfcp.far_id_ie(UPLINK_FAR), pfcp.apply_action_ie(uplink_action)))
        if network_instance is not None:
            s.network_instance = network_instance
            ni = pfcp.network_instance_ie(network_instance)
            ies.append(
                group(
                    IeType.UPDATE_PDR,
                    pfcp.pdr_id_ie(UPLINK_PDR),
                    group(
                        IeType.PDI,
                        pfcp.source_interface_ie(Interface.ACCESS),
                        FTeid(s.ul_teid, ipv6=s.n3_address).to_ie(),
                        ni,
                        pfcp.qfi_ie(s.qfi),
                    ),
                )
            )
            ies.append(
                group(
                    IeType.UPDATE_PDR,
                    pfcp.pdr_id_ie(DOWNLINK_PDR),
                    group(
                        IeType.PDI,
                        pfcp.source_interface_ie(Interface.CORE),
                        UeIpAddress(ipv6=s.ue_address, destination=True).to_ie(),
                        ni,
                    ),
                )
            )
        return self._request(MsgType.SESSION_MODIFICATION_REQUEST, ies, seid=s.up_seid or 0, session=s.name)

    def deletion(self, s: SmfSession) -> bytes:
        return self._request(MsgType.SESSION_DELETION_REQUEST, [], seid=s.up_seid or 0, session=s.name)

    def on_response(self, data: bytes) -> PfcpMessage:
        msg = pfcp.decode_pfcp(data)
        self.responses.append(msg)
        node = msg.find(IeType.NODE_ID)
        peer = str(NodeId.from_ie(node)) if node is not None else None
        if peer is not None:
            self.peers.add(peer)
        cause_ie = msg.find(IeType.CAUSE)
        cause = pfcp.int_value(cause_ie) if cause_ie else None
        _, name = self._pending.pop(msg.sequence, (None, None))
        if msg.message_type == MsgType.ASSOCIATION_SETUP_RESPONSE and cause == Cause.REQUEST_ACCEPTED and peer:
            self.associated.add(peer)
        s = self.sessions.get(name) if name else None
        if s is not None:
            ok = cause == Cause.REQUEST_ACCEPTED
            if msg.message_type == MsgType.SESSION_ESTABLISHMENT_RESPONSE:
                fseid = msg.find(IeType.F_SEID)
                if ok and fseid is not None:
                    s.up_seid = FSeid.from_ie(fseid).seid
                    s.state = "active"
                else:
                    s.state = "failed"
            elif msg.message_type == MsgType.SESSION_DELETION_RESPONSE and ok:
                s.state = "released"
                s.up_seid = None
        return msg

    def cause_of(self, msg: PfcpMessage) -> int | None:
        ie = msg.find(IeType.CAUSE)
        return None if ie is None else pfcp.int_value(ie)
