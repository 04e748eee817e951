/**
 * Canonical JSON, byte-compatible with the node's own encoder.
 *
 * The daemon serializes every response as JSON with sorted keys, "," and
 * ":" separators, and ASCII-only output (anything past 0x7E becomes a
 * \uXXXX escape, astral characters as surrogate pairs). Reproducing
 * those rules here means a result object serialized on either side of
 * the socket yields identical bytes, which is what the transparency
 * tests pin.
 */

export type JsonValue =
  | null
  | boolean
  | number
  | string
  | JsonValue[]
  | { [key: string]: JsonValue };

const SHORT_ESCAPES: Record<string, string> = {
  '"': '\\"',
  "\\": "\\\\",
  "\b": "\\b",
  "\f": "\\f",
  "\n": "\\n",
  "\r": "\\r",
  "\t": "\\t",
};

function escapeString(s: string): string {
  let out = '"';
  for (let i = 0; i < s.length; i++) {
    const ch = s[i] as string;
    const short = SHORT_ESCAPES[ch];
    if (short !== undefined) {
      out += short;
      continue;
    }
    const code = s.charCodeAt(i);
    if (code < 0x20 || code > 0x7e) {
      out += "\\u" + code.toString(16).padStart(4, "0");
    } else {
      out += ch;
    }
  }
  return out + '"';
}

export function canonicalJson(value: JsonValue): string {
  if (value === null) return "null";
  switch (typeof value) {
    case "boolean":
      return value ? "true" : "false";
    case "number":
      // the protocol carries no floats; refusing them beats silently
      // diverging from the peer encoder's float formatting
      if (!Number.isSafeInteger(value)) {
        throw new TypeError(`canonicalJson: not a safe integer: ${value}`);
      }
      return String(value);
    case "string":
      return escapeString(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  // protocol keys are ASCII, where code-unit sort equals code-point sort
  const keys = Object.keys(value).sort();
  const parts = keys.map(
    (k) => escapeString(k) + ":" + canonicalJson(value[k] as JsonValue),
  );
  return "{" + parts.join(",") + "}";
}

export function canonicalJsonLine(value: JsonValue): Buffer {
  return Buffer.from(canonicalJson(value) + "\n", "ascii");
}
