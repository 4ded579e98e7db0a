// Transport abstraction: the console only needs an ordered stream of frame
// lines and a way to send command lines back. The browser build uses a
// WebSocket (the service's bridge forwards the same frames); tests drive the
// view model through other implementations of the same interface.

export type ConnectionStatus = "connecting" | "connected" | "disconnected";

export interface FrameTransport {
  send(line: string): void;
  close(): void;
  readonly status: ConnectionStatus;
  onLine: ((line: string) => void) | null;
  onStatus: ((status: ConnectionStatus) => void) | null;
}

export class WebSocketTransport implements FrameTransport {
  onLine: ((line: string) => void) | null = null;
  onStatus: ((status: ConnectionStatus) => void) | null = null;
  private socket: WebSocket;
  private _status: ConnectionStatus = "connecting";
  private buffer = "";

  constructor(url: string) {
    this.socket = new WebSocket(url);
    this.socket.onopen = () => this.setStatus("connected");
    this.socket.onclose = () => this.setStatus("disconnected");
    this.socket.onerror = () => this.setStatus("disconnected");
    this.socket.onmessage = (event: MessageEvent) => {
      this.buffer += String(event.data);
      let index = this.buffer.indexOf("\n");
      while (index >= 0) {
        const line = this.buffer.slice(0, index);
        this.buffer = this.buffer.slice(index + 1);
        if (line.trim() && this.onLine) this.onLine(line);
        index = this.buffer.indexOf("\n");
      }
    };
  }

  get status(): ConnectionStatus {
    return this._status;
  }

  private setStatus(status: ConnectionStatus): void {
    this._status = status;
    if (this.onStatus) this.onStatus(status);
  }

  send(line: string): void {
    if (this._status === "connected") this.socket.send(line);
  }

  close(): void {
    this.socket.close();
  }
}
