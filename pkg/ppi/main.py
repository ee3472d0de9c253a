# Main entry point that initializes MCP and registers all tools
from mcp.server.fastmcp import FastMCP

# Import all tool registration functions from modules
from ppi.coherence import register_coherence
from ppi.engine import register_engine
from ppi.grid import register_analysis
from ppi.network import register_network
from ppi.panel import register_panel

# Initialize FastMCP server
mcp = FastMCP("ppi")

# Register all tools with MCP
register_panel(mcp)
register_network(mcp)
register_engine(mcp)
register_coherence(mcp)
register_analysis(mcp)

if __name__ == "__main__":
    # Initialize and run the server
    mcp.run(transport='stdio')
