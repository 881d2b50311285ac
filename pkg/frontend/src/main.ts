/** Browser entry point: the bundle is served by the node it talks to (at
 * /console/), so the API base is simply the page origin. */

import { ApiClient } from "./api.js";
import { ConsoleApp } from "./app.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app root element");

const app = new ConsoleApp(document, new ApiClient(window.location.origin));
app.mount(root);
app.startPolling();
