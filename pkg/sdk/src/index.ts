export { canonicalJson, canonicalJsonLine } from "./canonical.js";
export type { JsonValue } from "./canonical.js";
export { SdkError, SdkSession } from "./client.js";
export type {
  MapView,
  NodeIdentity,
  ResultObject,
  SetView,
} from "./client.js";
